"""Synthetic labeled face-like dataset: generation, splits, prototypes,
diversity resampling, and on-disk persistence.

Each sample is a single-channel h x w image in [0,1] drawn from a parametric
renderer. Gender drives global structure (face width, outline stroke, brow
and jaw shading, texture frequency); identity drives local structure (eye
offsets and size, mouth geometry, nose length, texture phase); a latent
binary cohort tag tints the background and is the attribute used by the
diversity-resampling scheme. Everything is a pure function of the generation
spec and its seed.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DegenerateInputError, EmptyClassError

SPLIT_NAMES = ("aux-train", "san-train", "unseen-train", "eval")


def seed_for(root_seed: int, *path) -> int:
    """Stable fan-out of one root seed into independent component seeds."""
    tag = "/".join(str(p) for p in path) + f"#{root_seed}"
    digest = hashlib.sha256(tag.encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class GenerationSpec:
    n_identities: int = 120
    samples_per_identity: int = 8
    h: int = 32
    w: int = 32
    cohort_fraction: float = 0.2
    seed: int = 7

    def validate(self) -> None:
        if self.n_identities < 2:
            raise ConfigurationError("need at least 2 identities")
        if self.h < 8 or self.w < 8:
            raise ConfigurationError(f"image size {self.h}x{self.w} below 8x8 minimum")
        if self.samples_per_identity < 1:
            raise ConfigurationError("samples_per_identity must be >= 1")
        if not (0.0 <= self.cohort_fraction < 1.0):
            raise ConfigurationError("cohort_fraction must be in [0, 1)")


@dataclass(frozen=True)
class FaceSample:
    image: np.ndarray          # (h, w) float32 in [0,1], read-only
    gender: int                # 1 = male, 0 = female
    identity: int
    cohort: int                # 1 = minority cohort


@dataclass
class FaceDataset:
    samples: list[FaceSample]
    split: str
    seed: int
    spec: GenerationSpec | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def genders(self) -> np.ndarray:
        return np.array([s.gender for s in self.samples], dtype=np.int64)

    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def cohorts(self) -> np.ndarray:
        return np.array([s.cohort for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class GenderPrototypes:
    female: np.ndarray
    male: np.ndarray


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _identity_params(spec: GenerationSpec, identity: int, gender: int) -> dict:
    rng = np.random.default_rng(seed_for(spec.seed, "identity", identity))
    male = gender == 1
    return {
        # gender-driven globals (identity jitter on top)
        "ax": (0.70 if male else 0.52) + rng.uniform(-0.03, 0.03),
        "ay": 0.82 + rng.uniform(-0.03, 0.03),
        "ring_w": (0.16 if male else 0.07) + rng.uniform(-0.015, 0.015),
        "brow_amp": (0.50 if male else 0.12) + rng.uniform(-0.04, 0.04),
        "jaw_amp": (0.32 if male else 0.02) + rng.uniform(-0.02, 0.02),
        "tex_freq": (5.6 if male else 2.9) + rng.uniform(-0.35, 0.35),
        # identity-driven locals
        "tex_phase": rng.uniform(0.0, 2.0 * np.pi),
        "tex_angle": rng.uniform(-0.5, 0.5),
        "eye_dx": rng.uniform(-0.12, 0.12, size=2),
        "eye_dy": rng.uniform(-0.10, 0.10, size=2),
        "eye_size": rng.uniform(0.05, 0.11, size=2),
        "mouth_y": 0.42 + rng.uniform(-0.12, 0.12),
        "mouth_w": rng.uniform(0.14, 0.32),
        "mouth_curve": rng.uniform(-0.5, 0.5),
        "nose_len": rng.uniform(0.10, 0.32),
        "nose_w": rng.uniform(0.035, 0.085),
        "mark_x": rng.uniform(-0.45, 0.45),
        "mark_y": rng.uniform(-0.05, 0.55),
        "mark_amp": rng.uniform(0.0, 0.4),
    }


def _render(spec: GenerationSpec, params: dict, cohort: int,
            rng: np.random.Generator) -> np.ndarray:
    h, w = spec.h, spec.w
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    dx, dy = rng.uniform(-0.04, 0.04, size=2)
    x = xx - dx
    y = yy - dy

    r = np.sqrt((x / params["ax"]) ** 2 + (y / params["ay"]) ** 2)
    interior = 1.0 / (1.0 + np.exp((r - 1.0) / 0.05))

    bg = 0.88 if cohort == 0 else 0.70
    img = bg * (1.0 - interior) + 0.62 * interior

    # face outline: stroke width is a gender cue
    img -= 0.40 * np.exp(-((r - 1.0) / params["ring_w"]) ** 2)

    # interior texture: frequency = gender cue, phase/orientation = identity cues
    ca, sa = np.cos(params["tex_angle"]), np.sin(params["tex_angle"])
    img += 0.09 * np.sin(np.pi * params["tex_freq"] * (ca * x + sa * y) + params["tex_phase"]) * interior

    # brow band and jaw shading (gender cues)
    img -= params["brow_amp"] * np.exp(-((y + 0.42) / 0.06) ** 2) * interior
    img -= params["jaw_amp"] * np.exp(-((y - 0.62) / 0.16) ** 2) * interior

    # eyes, nose, mouth, identity mark (identity cues)
    for side, exc in ((0, -0.30), (1, 0.30)):
        ex = exc + params["eye_dx"][side]
        ey = -0.22 + params["eye_dy"][side]
        es = params["eye_size"][side]
        img -= 0.50 * np.exp(-(((x - ex) / es) ** 2 + ((y - ey) / es) ** 2))

    nose = np.exp(-((x / params["nose_w"]) ** 2)) * np.exp(-(((y - 0.05) / params["nose_len"]) ** 2))
    img -= 0.22 * nose

    mouth_axis = y - params["mouth_y"] - params["mouth_curve"] * x ** 2
    img -= 0.45 * np.exp(-((mouth_axis / 0.05) ** 2)) * np.exp(-((x / params["mouth_w"]) ** 2))

    mark = np.exp(-(((x - params["mark_x"]) / 0.06) ** 2 + ((y - params["mark_y"]) / 0.06) ** 2))
    img -= params["mark_amp"] * mark * interior

    img *= rng.uniform(0.96, 1.04)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def generate_dataset(spec: GenerationSpec) -> FaceDataset:
    """Full sample pool for a spec; deterministic, split tag "full"."""
    spec.validate()
    id_rng = np.random.default_rng(seed_for(spec.seed, "cohorts"))
    n_minority = max(1, round(spec.cohort_fraction * spec.n_identities)) if spec.cohort_fraction > 0 else 0
    minority_ids = set(id_rng.permutation(spec.n_identities)[:n_minority].tolist())

    samples = []
    for identity in range(spec.n_identities):
        gender = identity % 2
        cohort = 1 if identity in minority_ids else 0
        params = _identity_params(spec, identity, gender)
        for j in range(spec.samples_per_identity):
            rng = np.random.default_rng(seed_for(spec.seed, "sample", identity, j))
            img = _freeze(_render(spec, params, cohort, rng))
            samples.append(FaceSample(img, gender, identity, cohort))
    return FaceDataset(samples, split="full", seed=spec.seed, spec=spec)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def partition_dataset(dataset: FaceDataset,
                      fractions: tuple[float, float, float, float] = (0.3, 0.3, 0.2, 0.2),
                      ) -> dict[str, FaceDataset]:
    """Identity-disjoint split into aux-train / san-train / unseen-train / eval.

    Deterministic given dataset.seed. Training identities and evaluation-side
    identities never overlap.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions}")
    gender_of = {s.identity: s.gender for s in dataset.samples}
    rng = np.random.default_rng(seed_for(dataset.seed, "partition"))

    # stratify by gender so every split sees both classes
    assignment: dict[int, str] = {}
    for g in (0, 1):
        ids = sorted(i for i, gen in gender_of.items() if gen == g)
        if not ids:
            raise ConfigurationError(f"dataset has no identities with gender={g}")
        order = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)
        counts = [int(round(f * n)) for f in fractions[:3]]
        counts.append(n - sum(counts))
        if min(counts) < 1:
            raise ConfigurationError(f"too few gender-{g} identities ({n}) for a 4-way split")
        cursor = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for identity in order[cursor:cursor + count]:
                assignment[identity] = name
            cursor += count

    out: dict[str, FaceDataset] = {}
    for name in SPLIT_NAMES:
        subset = [s for s in dataset.samples if assignment[s.identity] == name]
        genders = {s.gender for s in subset}
        if genders != {0, 1}:
            raise ConfigurationError(f"split {name} lacks one gender; reseed or enlarge the dataset")
        out[name] = FaceDataset(subset, split=name,
                                seed=seed_for(dataset.seed, "split", name),
                                spec=dataset.spec)
    _check_identity_disjoint(out)
    return out


def _check_identity_disjoint(splits: dict[str, FaceDataset]) -> None:
    train_ids = {s.identity for name in ("aux-train", "san-train") for s in splits[name].samples}
    held_ids = {s.identity for name in ("unseen-train", "eval") for s in splits[name].samples}
    if train_ids & held_ids:
        raise ConfigurationError(f"identity leak across split boundary: {sorted(train_ids & held_ids)}")


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------

def compute_prototypes(dataset: FaceDataset) -> GenderPrototypes:
    """Per-gender pixelwise mean images."""
    by_gender = {0: [], 1: []}
    for s in dataset.samples:
        by_gender[s.gender].append(s.image)
    for g, imgs in by_gender.items():
        if not imgs:
            raise EmptyClassError(f"no samples with gender={g}")
    female = _freeze(np.mean(by_gender[0], axis=0, dtype=np.float64))
    male = _freeze(np.mean(by_gender[1], axis=0, dtype=np.float64))
    return GenderPrototypes(female=female, male=male)


def select_prototypes(prototypes: GenderPrototypes, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (same-gender, opposite-gender) prototype for label y."""
    if y not in (0, 1):
        raise ConfigurationError(f"gender label must be 0 or 1, got {y}")
    if y == 1:
        return prototypes.male, prototypes.female
    return prototypes.female, prototypes.male


# ---------------------------------------------------------------------------
# diversity resampling
# ---------------------------------------------------------------------------

def resample_for_diversity(dataset: FaceDataset, member_index: int,
                           n_members: int, replication: int = 40) -> FaceDataset:
    """Training-set variant for ensemble member `member_index`.

    The minority-cohort samples are split into n_members disjoint subsets
    (deterministic given dataset.seed); subset[member_index], replicated
    `replication` times, is appended to the full dataset. Majority samples
    are untouched.
    """
    if not (0 <= member_index < n_members):
        raise ConfigurationError(f"member_index {member_index} outside [0, {n_members})")
    if replication < 1:
        raise ConfigurationError("replication must be >= 1")
    minority = [i for i, s in enumerate(dataset.samples) if s.cohort == 1]
    if not minority:
        raise DegenerateInputError("dataset has no minority-cohort samples to resample")
    rng = np.random.default_rng(seed_for(dataset.seed, "resample", n_members))
    shuffled = [minority[i] for i in rng.permutation(len(minority))]
    chunks = np.array_split(np.array(shuffled), n_members)
    chosen = chunks[member_index].tolist()
    extra = [dataset.samples[i] for i in chosen] * replication
    return FaceDataset(dataset.samples + extra, split=dataset.split,
                       seed=dataset.seed, spec=dataset.spec)


# ---------------------------------------------------------------------------
# persistence: manifest.json + images.bin
# ---------------------------------------------------------------------------

def spec_fingerprint(spec: GenerationSpec, split: str) -> str:
    payload = json.dumps({"spec": asdict(spec), "split": split}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_dataset(dataset: FaceDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h = dataset.samples[0].image.shape[0]
    w = dataset.samples[0].image.shape[1]
    nbytes = h * w * 4
    entries = []
    blobs = []
    for i, s in enumerate(dataset.samples):
        entries.append({"id": int(s.identity), "gender": int(s.gender),
                        "cohort": int(s.cohort), "offset": i * nbytes})
        blobs.append(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
    manifest = {
        "spec": asdict(dataset.spec) if dataset.spec else None,
        "split": dataset.split,
        "seed": dataset.seed,
        "h": h, "w": w,
        "fingerprint": spec_fingerprint(dataset.spec, dataset.split) if dataset.spec else None,
        "samples": entries,
    }
    (directory / "images.bin").write_bytes(b"".join(blobs))
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(directory) -> FaceDataset:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    raw = (directory / "images.bin").read_bytes()
    h, w = manifest["h"], manifest["w"]
    samples = []
    for entry in manifest["samples"]:
        img = np.frombuffer(raw, dtype="<f4", count=h * w, offset=entry["offset"])
        img = _freeze(img.reshape(h, w).astype(np.float32))
        samples.append(FaceSample(img, entry["gender"], entry["id"], entry["cohort"]))
    spec = GenerationSpec(**manifest["spec"]) if manifest.get("spec") else None
    return FaceDataset(samples, split=manifest["split"], seed=manifest["seed"], spec=spec)
