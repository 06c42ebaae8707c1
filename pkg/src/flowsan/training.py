"""The three SAN training regimes: single model, independent ensemble, and
the sequentially-stacked variant that re-trains each stage on the previous
stage's transformed dataset."""
from __future__ import annotations

import copy
import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import metrics
from .data import FaceDataset, FaceSample, GenderPrototypes, seed_for
from .exceptions import ConfigurationError, TrainingError
from .losses import LossWeights, loss_gender, loss_matching, loss_pixelwise, loss_total
from .models import (
    FaceMatcher,
    GenderClassifier,
    SanConfig,
    SanModel,
    _np_dtype,
    load_model,
    save_model,
)
from .nn import Adam, Tensor, mean

SCHEMES = ("none", "against-input", "against-original")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    scheme: str = "against-original"
    arch: SanConfig = field(default_factory=SanConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be positive")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        self.weights.validate()


@dataclass
class SanChain:
    """Ordered SAN models evaluated as an ensemble or as a sequential stack."""
    members: list[SanModel]
    mode: str  # "ensemble" | "flow"
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("a chain needs at least one member")
        if self.mode not in ("ensemble", "flow"):
            raise ConfigurationError(f"unknown chain mode {self.mode!r}")


def _prototype_stacks(genders: np.ndarray, prototypes: GenderPrototypes,
                      dtype) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample same/opposite prototype arrays [N,h,w]."""
    female = prototypes.female.astype(dtype)
    male = prototypes.male.astype(dtype)
    p_sm = np.where(genders[:, None, None] == 1, male, female)
    p_op = np.where(genders[:, None, None] == 1, female, male)
    return p_sm, p_op


def train_san(dataset: FaceDataset, g_aux: GenderClassifier, m_aux: FaceMatcher,
              prototypes: GenderPrototypes, cfg: TrainConfig,
              origin_images: np.ndarray | None = None,
              init: SanModel | None = None,
              log_path=None) -> SanModel:
    """One semi-adversarial training run against a frozen classifier/matcher
    pair.

    origin_images, when given, are the untouched originals aligned 1:1 with
    the dataset; the matching loss and the against-original pixel scheme are
    computed against them (the dataset images themselves may already be
    perturbed by earlier stages).
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigurationError("empty training dataset")
    g_aux.freeze()
    m_aux.freeze()

    images = dataset.images()
    genders = dataset.genders()
    if origin_images is None:
        origins = images
    else:
        if len(origin_images) != len(images):
            raise ConfigurationError("origin_images must align 1:1 with the dataset")
        origins = np.asarray(origin_images)

    san = copy.deepcopy(init) if init is not None else SanModel(cfg.arch, seed=cfg.seed)
    for p in san.parameters():
        p.requires_grad = True
    dt = _np_dtype(san.config.dtype)
    p_sm, p_op = _prototype_stacks(genders, prototypes, dt)
    # origins and the matcher are frozen, so their representations are constant
    rep_origins = m_aux.represent(origins) if cfg.weights.match != 0 else None

    opt = Adam(san.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(seed_for(cfg.seed, "san-train"))
    log_rows = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = Tensor(images[batch][:, None].astype(dt))
            ob = Tensor(origins[batch][:, None].astype(dt))
            yb = Tensor(genders[batch].astype(dt))
            sm = Tensor(p_sm[batch][:, None])
            op = Tensor(p_op[batch][:, None])

            out_sm = san.forward(xb, sm)
            out_op = san.forward(xb, op)

            if cfg.scheme == "none" or cfg.weights.pixel == 0:
                j_pix = Tensor(np.zeros((), dtype=dt))
            elif cfg.scheme == "against-input":
                j_pix = loss_pixelwise(xb, out_sm)
            else:
                j_pix = loss_pixelwise(ob, out_sm)

            if cfg.weights.match == 0:
                j_match = Tensor(np.zeros((), dtype=dt))
            else:
                j_match = loss_matching(Tensor(rep_origins[batch]),
                                        m_aux.representation(out_op))
            if cfg.weights.gender == 0:
                j_gender = Tensor(np.zeros((), dtype=dt))
            else:
                j_gender = loss_gender(yb, g_aux.forward(out_sm), g_aux.forward(out_op))

            total = loss_total(cfg.weights, j_pix, j_match, j_gender)
            values = (j_pix.item(), j_match.item(), j_gender.item(), total.item())
            if not all(np.isfinite(v) for v in values):
                raise TrainingError(
                    f"non-finite loss at step {step}: J_D={values[0]:.4g} "
                    f"J_M={values[1]:.4g} J_G={values[2]:.4g}")
            total.backward()
            opt.step()
            log_rows.append((step, *values))
            step += 1

    if log_path is not None:
        write_training_log(log_path, log_rows)
    san.train_log = log_rows
    return san


def pretrain_autoencoder(dataset: FaceDataset, prototypes: GenderPrototypes,
                         cfg: TrainConfig) -> SanModel:
    """Reconstruction-only warm start: trains the autoencoder to reproduce its
    input under the same-gender prototype (no classifier or matcher in the
    loop). Ensemble members fine-tune from this shared base, which keeps the
    adversarial phase short and the matcher utility high."""
    cfg.validate()
    images = dataset.images()
    genders = dataset.genders()
    san = SanModel(cfg.arch, seed=cfg.seed)
    dt = _np_dtype(san.config.dtype)
    p_sm, _ = _prototype_stacks(genders, prototypes, dt)
    opt = Adam(san.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(seed_for(cfg.seed, "pretrain"))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = Tensor(images[batch][:, None].astype(dt))
            sm = Tensor(p_sm[batch][:, None])
            loss = loss_pixelwise(xb, san.forward(xb, sm))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite reconstruction loss at step {opt.step_count}")
            loss.backward()
            opt.step()
    return san


def write_training_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "J_D", "J_M", "J_G", "J_tot"])
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])


# ---------------------------------------------------------------------------
# ensemble (independent members)
# ---------------------------------------------------------------------------

def _member_cfg(cfg: TrainConfig, index: int) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                       seed=seed_for(cfg.seed, "member", index),
                       weights=cfg.weights, lr=cfg.lr, betas=cfg.betas,
                       eps=cfg.eps, scheme=cfg.scheme, arch=cfg.arch)


def _train_member(args):
    dataset, classifier, matcher, prototypes, member_cfg, init = args
    return train_san(dataset, classifier, matcher, prototypes, member_cfg, init=init)


def train_ensemble(dataset: FaceDataset, classifiers: list[GenderClassifier],
                   m_aux: FaceMatcher, prototypes: GenderPrototypes,
                   cfg: TrainConfig, n_jobs: int = 1,
                   init: SanModel | None = None) -> SanChain:
    """n independent train_san runs, one per auxiliary classifier, all on the
    unmodified dataset. Members are a function of (dataset, G_i, M, seed_i,
    init) only, so they may be trained in parallel. `init` is typically the
    shared reconstruction-pretrained base."""
    if not classifiers:
        raise ConfigurationError("need at least one auxiliary classifier")
    jobs = [(dataset, clf, m_aux, prototypes, _member_cfg(cfg, i), init)
            for i, clf in enumerate(classifiers)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            members = list(pool.map(_train_member, jobs))
    else:
        members = [_train_member(job) for job in jobs]
    provenance = [{"classifier": i, "order": i + 1, "seed": jobs[i][4].seed}
                  for i in range(len(members))]
    for member in members:
        member.freeze()
    return SanChain(members=members, mode="ensemble", provenance=provenance)


# ---------------------------------------------------------------------------
# sequential stacking
# ---------------------------------------------------------------------------

def _transform_dataset(dataset: FaceDataset, san: SanModel,
                       prototypes: GenderPrototypes) -> FaceDataset:
    """Replace every image with the member's opposite-prototype output."""
    dt = _np_dtype(san.config.dtype)
    images = dataset.images()
    genders = dataset.genders()
    _, p_op = _prototype_stacks(genders, prototypes, dt)
    out = san.forward(Tensor(images[:, None].astype(dt)), Tensor(p_op[:, None])).data[:, 0]
    samples = [FaceSample(np.ascontiguousarray(img), s.gender, s.identity, s.cohort)
               for img, s in zip(out, dataset.samples)]
    for s in samples:
        s.image.flags.writeable = False
    return FaceDataset(samples, split=dataset.split, seed=dataset.seed, spec=dataset.spec)


def _confusion_check(san: SanModel, classifier: GenderClassifier,
                     dataset: FaceDataset, prototypes: GenderPrototypes,
                     stage: int) -> float:
    dt = _np_dtype(san.config.dtype)
    _, p_op = _prototype_stacks(dataset.genders(), prototypes, dt)
    out = san.forward(Tensor(dataset.images()[:, None].astype(dt)),
                      Tensor(p_op[:, None])).data[:, 0]
    auc = metrics.roc_auc(classifier.predict_proba(out), dataset.genders())
    if auc > 0.75:
        warnings.warn(
            f"stage {stage} failed its auxiliary-confusion check: "
            f"AUC {auc:.3f} on its own classifier's outputs", stacklevel=3)
    return auc


def train_flowsan(dataset: FaceDataset, classifiers: list[GenderClassifier],
                  m_aux: FaceMatcher, prototypes: GenderPrototypes,
                  cfg: TrainConfig, init_chain: SanChain | None = None,
                  run_dir=None) -> SanChain:
    """Sequential training: stage t learns on the dataset as transformed by
    stages 1..t-1, against classifier G_t, with matching and against-original
    pixel losses anchored to the untouched originals.

    init_chain, when given, provides per-stage warm starts (the independent
    ensemble members); stages are then fine-tuned for cfg.epochs.
    """
    if not classifiers:
        raise ConfigurationError("need at least one auxiliary classifier")
    if init_chain is not None and len(init_chain.members) < len(classifiers):
        raise ConfigurationError("init_chain has fewer members than classifiers")

    from .data import save_dataset  # local to keep import surface tidy

    origins = dataset.images()
    current = dataset
    members: list[SanModel] = []
    provenance: list[dict] = []
    for t, classifier in enumerate(classifiers, start=1):
        member_cfg = _member_cfg(cfg, t - 1)
        init = init_chain.members[t - 1] if init_chain is not None else None
        log_path = (Path(run_dir) / "members" / f"san_{t}" / "training_log.csv"
                    if run_dir is not None else None)
        san = train_san(current, classifier, m_aux, prototypes, member_cfg,
                        origin_images=origins, init=init, log_path=log_path)
        auc = _confusion_check(san, classifier, current, prototypes, t)
        members.append(san)
        provenance.append({"classifier": t - 1, "order": t,
                           "seed": member_cfg.seed, "aux_auc_after": auc})
        san.freeze()
        if t < len(classifiers):
            current = _transform_dataset(current, san, prototypes)
            if run_dir is not None:
                save_dataset(current, Path(run_dir) / "transformed" / f"stage_{t}")
    return SanChain(members=members, mode="flow", provenance=provenance)


# ---------------------------------------------------------------------------
# chain persistence (run-directory layout)
# ---------------------------------------------------------------------------

def save_chain(chain: SanChain, run_dir, config_payload: dict | None = None) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for t, member in enumerate(chain.members, start=1):
        member_dir = run_dir / "members" / f"san_{t}"
        save_model(member, member_dir)
        if getattr(member, "train_log", None):
            write_training_log(member_dir / "training_log.csv", member.train_log)
    payload = {"mode": chain.mode, "n_members": len(chain.members),
               "provenance": chain.provenance}
    if config_payload:
        payload["config"] = config_payload
    with open(run_dir / "run.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def load_chain(run_dir) -> SanChain:
    run_dir = Path(run_dir)
    with open(run_dir / "run.json") as fh:
        payload = json.load(fh)
    members = [load_model(run_dir / "members" / f"san_{t}")
               for t in range(1, payload["n_members"] + 1)]
    return SanChain(members=members, mode=payload["mode"],
                    provenance=payload.get("provenance", []))
