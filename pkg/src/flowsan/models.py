"""The three network roles: prototype-conditioned perturbation autoencoder,
gender classifiers, and face matchers, plus their training loops.

All models are plain numpy-parameter objects over the nn engine. Downsampling
is conv + 2x2 mean pooling, upsampling is nearest-neighbour + conv, so every
conv keeps integral geometry. Supported image extents are multiples of
2**depth.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import metrics
from .data import FaceDataset, seed_for
from .exceptions import DegenerateInputError, EmptyClassError, ShapeError, TrainingError
from .losses import binary_cross_entropy
from .nn import (
    Adam,
    Conv2d,
    Dense,
    Parameter,
    Tensor,
    concat_channels,
    global_mean_pool,
    leaky_relu,
    load_checkpoint,
    mean,
    mean_pool,
    reshape,
    save_checkpoint,
    sigmoid,
    softmax_cross_entropy,
    upsample2x,
)

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _np_dtype(name: str):
    return _DTYPES[name]


# ---------------------------------------------------------------------------
# SAN autoencoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SanConfig:
    enc_channels: tuple[int, ...] = (8, 16, 16)
    feature_channels: int = 16
    kernel: int = 3
    dtype: str = "float32"

    @property
    def depth(self) -> int:
        return len(self.enc_channels)


class SanModel:
    """Prototype-conditioned autoencoder: concat(image, prototype) in, single
    sigmoid channel out, with the prototype re-appended before the 1x1 fusion
    conv."""

    role = "san"

    def __init__(self, config: SanConfig = SanConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        dt = _np_dtype(config.dtype)
        k = config.kernel

        self.encoder = []
        c_prev = 2
        for c in config.enc_channels:
            self.encoder.append(Conv2d(c_prev, c, k, rng, dtype=dt))
            c_prev = c
        dec_channels = list(reversed(config.enc_channels))[:-1] + [config.feature_channels]
        self.decoder = []
        for c in dec_channels:
            self.decoder.append(Conv2d(c_prev, c, k, rng, dtype=dt))
            c_prev = c
        self.fusion = Conv2d(config.feature_channels + 1, 1, 1, rng, init="xavier", dtype=dt)

    # -- parameters -----------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.encoder):
            out += [(f"enc{i}.weight", layer.weight), (f"enc{i}.bias", layer.bias)]
        for i, layer in enumerate(self.decoder):
            out += [(f"dec{i}.weight", layer.weight), (f"dec{i}.bias", layer.bias)]
        out += [("fusion.weight", self.fusion.weight), ("fusion.bias", self.fusion.bias)]
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    # -- forward ----------------------------------------------------------
    def forward(self, img: Tensor, proto: Tensor) -> Tensor:
        """img, proto: [N,1,H,W] tensors; returns [N,1,H,W] in (0,1)."""
        if img.shape != proto.shape:
            raise ShapeError(f"image {img.shape} vs prototype {proto.shape}")
        h, w = img.shape[2], img.shape[3]
        factor = 2 ** self.config.depth
        if h % factor or w % factor:
            raise ShapeError(f"extents {h}x{w} must be multiples of {factor}")
        x = concat_channels([img, proto])
        for conv in self.encoder:
            x = mean_pool(leaky_relu(conv(x)))
        for conv in self.decoder:
            x = leaky_relu(conv(upsample2x(x)))
        x = concat_channels([x, proto])
        return sigmoid(self.fusion(x))

    def transform(self, images: np.ndarray, proto: np.ndarray) -> np.ndarray:
        """Numpy convenience forward; images [h,w] or [N,h,w], proto [h,w]
        or per-sample [N,h,w]."""
        dt = _np_dtype(self.config.dtype)
        single = images.ndim == 2
        imgs = images[None] if single else images
        proto = np.asarray(proto, dtype=dt)
        protos = np.broadcast_to(proto[None] if proto.ndim == 2 else proto, imgs.shape)
        out = self.forward(Tensor(imgs[:, None].astype(dt)),
                           Tensor(np.ascontiguousarray(protos[:, None], dtype=dt)))
        result = out.data[:, 0]
        return result[0] if single else result


def san_forward(san: SanModel, image: np.ndarray, proto: np.ndarray) -> np.ndarray:
    """SAN(I; P): perturb `image` under prototype `proto`."""
    if image.shape != proto.shape and image.shape[-2:] != proto.shape[-2:]:
        raise ShapeError(f"image {image.shape} vs prototype {proto.shape}")
    return san.transform(np.asarray(image), proto)


# ---------------------------------------------------------------------------
# gender classifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    dtype: str = "float32"


class GenderClassifier:
    """Small CNN emitting P(Male) per image."""

    role = "gender"

    def __init__(self, config: ClassifierConfig = ClassifierConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        dt = _np_dtype(config.dtype)
        self.convs = []
        c_prev = 1
        for c in config.widths:
            self.convs.append(Conv2d(c_prev, c, config.kernel, rng, dtype=dt))
            c_prev = c
        self.head = Dense(c_prev, 1, rng, init="xavier", dtype=dt)

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.convs):
            out += [(f"conv{i}.weight", layer.weight), (f"conv{i}.bias", layer.bias)]
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def forward(self, x: Tensor) -> Tensor:
        """x: [N,1,H,W] -> probabilities [N]."""
        for conv in self.convs:
            x = mean_pool(leaky_relu(conv(x)))
        x = global_mean_pool(x)
        logits = self.head(x)
        return reshape(sigmoid(logits), (x.shape[0],))

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        dt = _np_dtype(self.config.dtype)
        single = images.ndim == 2
        imgs = images[None] if single else images
        out = self.forward(Tensor(imgs[:, None].astype(dt))).data
        return out[0] if single else out


# ---------------------------------------------------------------------------
# face matcher
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatcherConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    rep_dim: int = 64
    kernel: int = 3
    input_hw: tuple[int, int] = (32, 32)
    n_classes: int = 2
    dtype: str = "float32"


class FaceMatcher:
    """Identity-classification CNN whose penultimate activations are the face
    representation; match scores are cosine similarities of representations."""

    role = "matcher"

    def __init__(self, config: MatcherConfig = MatcherConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        dt = _np_dtype(config.dtype)
        self.convs = []
        c_prev = 1
        for c in config.widths:
            self.convs.append(Conv2d(c_prev, c, config.kernel, rng, dtype=dt))
            c_prev = c
        h, w = config.input_hw
        factor = 2 ** len(config.widths)
        if h % factor or w % factor:
            raise ShapeError(f"input {h}x{w} not divisible by {factor}")
        flat = c_prev * (h // factor) * (w // factor)
        self.rep_layer = Dense(flat, config.rep_dim, rng, init="he", dtype=dt)
        self.head = Dense(config.rep_dim, config.n_classes, rng, init="xavier", dtype=dt)

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.convs):
            out += [(f"conv{i}.weight", layer.weight), (f"conv{i}.bias", layer.bias)]
        out += [("rep.weight", self.rep_layer.weight), ("rep.bias", self.rep_layer.bias),
                ("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def representation(self, x: Tensor) -> Tensor:
        """x: [N,1,H,W] -> [N, rep_dim]."""
        for conv in self.convs:
            x = mean_pool(leaky_relu(conv(x)))
        n = x.shape[0]
        x = reshape(x, (n, -1))
        return leaky_relu(self.rep_layer(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.representation(x))

    def represent(self, images: np.ndarray) -> np.ndarray:
        dt = _np_dtype(self.config.dtype)
        single = images.ndim == 2
        imgs = images[None] if single else images
        out = self.representation(Tensor(imgs[:, None].astype(dt))).data
        return out[0] if single else out


def match_score(matcher: FaceMatcher, image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Cosine similarity between the two images' representation vectors."""
    ra = matcher.represent(image_a)
    rb = matcher.represent(image_b)
    na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
    if na == 0 or nb == 0:
        raise DegenerateInputError("zero-norm representation vector")
    return float(np.dot(ra, rb) / (na * nb))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuxTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2
    min_train_auc: float = 0.9


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _stratified_holdout(genders: np.ndarray, fraction: float, rng: np.random.Generator):
    """Per-gender random holdout; returns (train_idx, val_idx)."""
    train, val = [], []
    for g in (0, 1):
        idx = np.flatnonzero(genders == g)
        idx = idx[rng.permutation(len(idx))]
        k = max(1, int(round(fraction * len(idx)))) if len(idx) > 1 else 0
        val.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def train_gender_classifier(dataset: FaceDataset, config: AuxTrainConfig,
                            arch: ClassifierConfig = ClassifierConfig()) -> GenderClassifier:
    """Binary cross-entropy training; raises TrainingError if the classifier
    fails to fit its own train split (AUC < min_train_auc)."""
    genders = dataset.genders()
    if set(genders.tolist()) != {0, 1}:
        raise EmptyClassError("gender classifier training needs both genders")
    images = dataset.images()
    model = GenderClassifier(arch, seed=seed_for(config.seed, "gender-init"))
    dt = _np_dtype(arch.dtype)

    rng = np.random.default_rng(seed_for(config.seed, "gender-train"))
    train_idx, val_idx = _stratified_holdout(genders, config.val_fraction, rng)
    x_train, y_train = images[train_idx], genders[train_idx]

    opt = Adam(model.parameters(), lr=config.lr)
    for _ in range(config.epochs):
        for batch in _batches(len(x_train), config.batch_size, rng):
            xb = Tensor(x_train[batch][:, None].astype(dt))
            yb = Tensor(y_train[batch].astype(dt))
            loss = mean(binary_cross_entropy(yb, model.forward(xb)))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at step {opt.step_count}")
            loss.backward()
            opt.step()

    train_auc = metrics.roc_auc(model.predict_proba(x_train), y_train)
    if train_auc < config.min_train_auc:
        raise TrainingError(
            f"gender classifier failed to converge: train AUC {train_auc:.3f} "
            f"< {config.min_train_auc} after {config.epochs} epochs "
            f"({len(x_train)} samples, lr={config.lr})")
    model.val_auc = (metrics.roc_auc(model.predict_proba(images[val_idx]), genders[val_idx])
                     if len(val_idx) else float("nan"))
    model.freeze()
    return model


@dataclass(frozen=True)
class MatcherTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    min_train_auc: float = 0.9


def train_face_matcher(dataset: FaceDataset, config: MatcherTrainConfig,
                       arch: MatcherConfig = MatcherConfig()) -> FaceMatcher:
    """Identity-classification training; the penultimate layer becomes the
    representation map. Raises TrainingError when the train-split
    genuine/impostor cosine AUC stays below min_train_auc."""
    identities = dataset.identities()
    unique_ids = np.unique(identities)
    if len(unique_ids) < 2:
        raise DegenerateInputError("matcher training needs at least 2 identities")
    counts = {int(i): int((identities == i).sum()) for i in unique_ids}
    if min(counts.values()) < 2:
        raise DegenerateInputError("matcher training needs >= 2 samples per identity")

    class_of = {int(identity): k for k, identity in enumerate(unique_ids)}
    labels = np.array([class_of[int(i)] for i in identities], dtype=np.int64)
    images = dataset.images()
    h, w = images.shape[1], images.shape[2]
    arch = replace(arch, n_classes=len(unique_ids), input_hw=(h, w))
    model = FaceMatcher(arch, seed=seed_for(config.seed, "matcher-init"))
    dt = _np_dtype(arch.dtype)

    rng = np.random.default_rng(seed_for(config.seed, "matcher-train"))
    opt = Adam(model.parameters(), lr=config.lr)
    for _ in range(config.epochs):
        for batch in _batches(len(images), config.batch_size, rng):
            xb = Tensor(images[batch][:, None].astype(dt))
            loss = softmax_cross_entropy(model.forward(xb), labels[batch])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at step {opt.step_count}")
            loss.backward()
            opt.step()

    pairs = metrics.build_pair_indices(dataset, n_impostor=2000,
                                       seed=seed_for(config.seed, "matcher-check"))
    rep = model.represent(images)
    gen = metrics.cosine_scores(rep, rep, pairs.genuine)
    imp = metrics.cosine_scores(rep, rep, pairs.impostor)
    auc = metrics.roc_auc(np.concatenate([gen, imp]),
                          np.concatenate([np.ones(len(gen)), np.zeros(len(imp))]))
    if auc < config.min_train_auc:
        raise TrainingError(
            f"matcher failed to converge: train genuine/impostor AUC {auc:.3f} "
            f"< {config.min_train_auc} ({len(unique_ids)} identities, {config.epochs} epochs)")
    model.freeze()
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_ROLES = {}


def _register(cls, config_cls):
    _ROLES[cls.role] = (cls, config_cls)


_register(SanModel, SanConfig)
_register(GenderClassifier, ClassifierConfig)
_register(FaceMatcher, MatcherConfig)


def _config_to_dict(config) -> dict:
    return asdict(config)


def _config_from_dict(config_cls, d: dict):
    d = dict(d)
    for key, value in d.items():
        if isinstance(value, list):
            d[key] = tuple(value)
    return config_cls(**d)


def save_model(model, directory) -> None:
    save_checkpoint(directory, model.named_parameters(),
                    _config_to_dict(model.config), model.role, model.seed)


def load_model(directory, frozen: bool = True):
    manifest, arrays = load_checkpoint(directory)
    role = manifest["role"]
    if role not in _ROLES:
        raise ShapeError(f"unknown checkpoint role {role!r}")
    cls, config_cls = _ROLES[role]
    model = cls(_config_from_dict(config_cls, manifest["config"]), seed=manifest.get("seed") or 0)
    named = dict(model.named_parameters())
    if set(named) != set(arrays):
        raise ShapeError("checkpoint parameter names do not match architecture")
    for name, arr in arrays.items():
        if named[name].data.shape != arr.shape:
            raise ShapeError(f"shape mismatch for {name}")
        named[name].data[...] = arr
    if frozen:
        model.freeze()
    return model


def parameter_checksum(model) -> str:
    """Order-sensitive digest of all parameter bytes; used to assert freezes."""
    import hashlib
    digest = hashlib.sha256()
    for name, p in model.named_parameters():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()
