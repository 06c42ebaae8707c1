"""Chain evaluation operators: the stacking recursion, ensemble averaging,
random (Gibbs) selection, the oracle best-perturbed selector, and trace
export as portable graymaps."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GenderPrototypes, select_prototypes
from .exceptions import UsageError
from .losses import CLAMP_EPS
from .models import GenderClassifier, SanModel, san_forward
from .training import SanChain


def _check_depth(chain: SanChain, t: int) -> None:
    if not (1 <= t <= len(chain.members)):
        raise UsageError(f"depth {t} outside 1..{len(chain.members)}")


@dataclass
class PerturbationTrace:
    original: np.ndarray
    outputs: list[np.ndarray]
    mode: str
    member_ids: list[int]
    selected_index: int | None = None
    rng_seed: int | None = None


# ---------------------------------------------------------------------------
# stacking recursion
# ---------------------------------------------------------------------------

def psi(chain: SanChain, image: np.ndarray, t: int,
        prototypes: GenderPrototypes, y: int) -> np.ndarray:
    """Recursive stack application: SAN_t(...SAN_1(I)...), each stage using
    the opposite-gender prototype for label y."""
    _check_depth(chain, t)
    _, p_op = select_prototypes(prototypes, y)
    if t == 1:
        return san_forward(chain.members[0], image, p_op)
    return san_forward(chain.members[t - 1], psi(chain, image, t - 1, prototypes, y), p_op)


def psi_iterative(chain: SanChain, image: np.ndarray, t: int,
                  prototypes: GenderPrototypes, y: int) -> np.ndarray:
    """Loop form of `psi`; must agree bitwise with the recursion."""
    _check_depth(chain, t)
    _, p_op = select_prototypes(prototypes, y)
    out = image
    for stage in range(t):
        out = san_forward(chain.members[stage], out, p_op)
    return out


def psi_trace(chain: SanChain, image: np.ndarray, prototypes: GenderPrototypes,
              y: int, depth: int | None = None) -> PerturbationTrace:
    """All intermediate outputs I'_1..I'_depth for one image."""
    depth = len(chain.members) if depth is None else depth
    _check_depth(chain, depth)
    _, p_op = select_prototypes(prototypes, y)
    outputs = []
    current = image
    for stage in range(depth):
        current = san_forward(chain.members[stage], current, p_op)
        outputs.append(current)
    return PerturbationTrace(original=image, outputs=outputs, mode=chain.mode,
                             member_ids=list(range(1, depth + 1)))


def psi_trace_batch(chain: SanChain, images: np.ndarray,
                    prototypes: GenderPrototypes, labels: np.ndarray,
                    depth: int) -> np.ndarray:
    """[depth, N, h, w] stack outputs for a batch with per-sample labels."""
    _check_depth(chain, depth)
    p_op = _op_protos(prototypes, labels)
    outputs = np.empty((depth,) + images.shape, dtype=np.float32)
    current = images
    for stage in range(depth):
        current = chain.members[stage].transform(current, p_op)
        outputs[stage] = current
    return outputs


def _op_protos(prototypes: GenderPrototypes, labels: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(labels)[:, None, None] == 1,
                    prototypes.female, prototypes.male)


def member_outputs(chain: SanChain, images: np.ndarray,
                   prototypes: GenderPrototypes, labels: np.ndarray) -> np.ndarray:
    """[n, N, h, w]: every member's opposite-prototype output on a batch."""
    p_op = _op_protos(prototypes, labels)
    return np.stack([m.transform(images, p_op) for m in chain.members])


# ---------------------------------------------------------------------------
# ensemble operators
# ---------------------------------------------------------------------------

def ens_avg(chain: SanChain, image: np.ndarray, prototypes: GenderPrototypes,
            y: int, t: int) -> np.ndarray:
    """Pixelwise mean of the first t members' outputs."""
    _check_depth(chain, t)
    _, p_op = select_prototypes(prototypes, y)
    outs = [san_forward(chain.members[i], image, p_op) for i in range(t)]
    return np.mean(outs, axis=0, dtype=np.float64).astype(outs[0].dtype)


def ens_gibbs(chain: SanChain, image: np.ndarray, prototypes: GenderPrototypes,
              y: int, t: int, rng) -> tuple[np.ndarray, int]:
    """Uniformly select one of the first t members (seeded); returns the
    output and the 1-based selected index."""
    _check_depth(chain, t)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pick = int(rng.integers(0, t))
    _, p_op = select_prototypes(prototypes, y)
    return san_forward(chain.members[pick], image, p_op), pick + 1


def best_member_indices(member_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample oracle pick among member outputs scored by one classifier.

    member_probs: [t, N] P(Male) per member output. Male samples take the
    argmin, female the argmax; ties resolve to the lowest index.
    """
    labels = np.asarray(labels)
    mins = np.argmin(member_probs, axis=0)
    maxs = np.argmax(member_probs, axis=0)
    return np.where(labels == 1, mins, maxs)


def ens_best(chain: SanChain, image: np.ndarray, y: int, classifier: GenderClassifier,
             prototypes: GenderPrototypes, t: int) -> tuple[np.ndarray, int]:
    """Oracle best-perturbed output for a known classifier: the member whose
    output the classifier mis-genders hardest (evaluation-only diagnostic)."""
    _check_depth(chain, t)
    _, p_op = select_prototypes(prototypes, y)
    outs = [san_forward(chain.members[i], image, p_op) for i in range(t)]
    probs = np.array([float(classifier.predict_proba(out)) for out in outs])
    pick = int(np.argmin(probs)) if y == 1 else int(np.argmax(probs))
    return outs[pick], pick + 1


def predict_label(classifier: GenderClassifier, image: np.ndarray) -> int:
    """Label-free helper: estimate y with a classifier before choosing the
    prototype (excluded from the acceptance protocol)."""
    return int(classifier.predict_proba(image) >= 0.5)


# ---------------------------------------------------------------------------
# portable graymap export
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) graymap from a [0,1] float image."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Reads binary or ASCII graymaps back to [0,1] floats."""
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P5", b"P2"):
        raise UsageError(f"{path} is not a portable graymap")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if raw[:2] == b"P5":
        data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos + 1)
    else:
        data = np.array(raw[pos:].split(), dtype=np.int64)[:h * w]
    return (data.reshape(h, w).astype(np.float32) / maxval)


def export_trace_grid(trace: PerturbationTrace, path, gap: int = 2) -> None:
    """Original plus each stage output side by side in one graymap."""
    panels = [trace.original] + list(trace.outputs)
    h, w = panels[0].shape
    grid = np.ones((h, len(panels) * (w + gap) - gap), dtype=np.float64)
    for i, panel in enumerate(panels):
        grid[:, i * (w + gap): i * (w + gap) + w] = panel
    write_pgm(path, grid)
