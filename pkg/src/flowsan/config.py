"""Run configuration: one JSON-serializable tree of dataclasses holding every
default, plus the seed fan-out used by all commands."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .data import GenerationSpec, seed_for
from .exceptions import ConfigurationError
from .losses import LossWeights
from .models import AuxTrainConfig, ClassifierConfig, MatcherConfig, MatcherTrainConfig, SanConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataPlan:
    n_identities: int = 120
    samples_per_identity: int = 8
    h: int = 32
    w: int = 32
    cohort_fraction: float = 0.2
    n_eval_datasets: int = 2  # primary plus (n-1) alternates from distinct seeds

    def spec(self, seed: int, index: int) -> GenerationSpec:
        return GenerationSpec(self.n_identities, self.samples_per_identity,
                              self.h, self.w, self.cohort_fraction,
                              seed=seed_for(seed, "data", index))


@dataclass(frozen=True)
class ModelPlan:
    # ensemble member i trains against aux_classifiers[i % len]; width/depth
    # variety plus the cohort resampling is what diversifies the members
    aux_classifiers: tuple[ClassifierConfig, ...] = (
        ClassifierConfig(widths=(8, 16, 32)),
        ClassifierConfig(widths=(12, 24, 48)),
        ClassifierConfig(widths=(16, 32)),
        ClassifierConfig(widths=(8, 16)),
        ClassifierConfig(widths=(6, 12, 24)),
    )
    unseen_classifiers: tuple[ClassifierConfig, ...] = (
        ClassifierConfig(widths=(8, 16, 32)),
        ClassifierConfig(widths=(12, 24, 48)),
        ClassifierConfig(widths=(16, 32)),
    )
    aux_matcher: MatcherConfig = MatcherConfig(widths=(8, 16, 32), rep_dim=64)
    unseen_matchers: tuple[MatcherConfig, ...] = (
        MatcherConfig(widths=(8, 16, 32), rep_dim=64),
        MatcherConfig(widths=(12, 24, 36), rep_dim=48),
    )


@dataclass(frozen=True)
class EvalPlan:
    depths: tuple[int, ...] = (1, 2, 3, 4, 5)
    fmrs: tuple[float, ...] = (0.001, 0.01)
    n_impostor: int = 20000


@dataclass
class EvalSettings:
    """Runtime bundle handed to evaluate_suite."""
    n_impostor: int
    fmrs: tuple[float, ...]
    seed: int
    prototypes: object = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    n_members: int = 5
    replication: int = 40
    data: DataPlan = field(default_factory=DataPlan)
    models: ModelPlan = field(default_factory=ModelPlan)
    aux_train: AuxTrainConfig = AuxTrainConfig(epochs=20)
    matcher_train: MatcherTrainConfig = MatcherTrainConfig(epochs=30)
    pretrain: TrainConfig = TrainConfig(epochs=40, batch_size=64)
    ensemble_train: TrainConfig = TrainConfig(epochs=15, batch_size=64)
    flow_train: TrainConfig = TrainConfig(epochs=10, batch_size=64)
    eval: EvalPlan = field(default_factory=EvalPlan)

    def validate(self) -> None:
        if self.n_members < 1:
            raise ConfigurationError("n_members must be >= 1")
        if self.data.n_eval_datasets < 1:
            raise ConfigurationError("need at least one evaluation dataset")
        self.ensemble_train.validate()
        self.flow_train.validate()


# ---------------------------------------------------------------------------
# JSON round-trip
# ---------------------------------------------------------------------------

def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def _build(cls, payload: dict):
    return cls(**payload)


def config_from_dict(payload: dict) -> RunConfig:
    payload = dict(payload)

    def sub(key, builder, default):
        if key not in payload:
            return default
        return builder(payload.pop(key))

    def tup(seq):
        return tuple(seq)

    def classifier(d):
        return ClassifierConfig(widths=tup(d["widths"]), kernel=d.get("kernel", 3),
                                dtype=d.get("dtype", "float32"))

    def matcher(d):
        return MatcherConfig(widths=tup(d["widths"]), rep_dim=d.get("rep_dim", 64),
                             kernel=d.get("kernel", 3),
                             input_hw=tup(d.get("input_hw", (32, 32))),
                             n_classes=d.get("n_classes", 2),
                             dtype=d.get("dtype", "float32"))

    def train(d):
        d = dict(d)
        weights = d.pop("weights", None)
        arch = d.pop("arch", None)
        kwargs = dict(d)
        if weights is not None:
            kwargs["weights"] = LossWeights(**weights)
        if arch is not None:
            kwargs["arch"] = SanConfig(enc_channels=tup(arch["enc_channels"]),
                                       feature_channels=arch.get("feature_channels", 16),
                                       kernel=arch.get("kernel", 3),
                                       dtype=arch.get("dtype", "float32"))
        if "betas" in kwargs:
            kwargs["betas"] = tup(kwargs["betas"])
        return TrainConfig(**kwargs)

    def models_plan(d):
        return ModelPlan(
            aux_classifiers=tuple(classifier(c) for c in d["aux_classifiers"]),
            unseen_classifiers=tuple(classifier(c) for c in d["unseen_classifiers"]),
            aux_matcher=matcher(d["aux_matcher"]),
            unseen_matchers=tuple(matcher(m) for m in d["unseen_matchers"]),
        )

    def eval_plan(d):
        return EvalPlan(depths=tup(d["depths"]), fmrs=tup(d["fmrs"]),
                        n_impostor=d["n_impostor"])

    kwargs = {
        "data": sub("data", lambda d: DataPlan(**d), DataPlan()),
        "models": sub("models", models_plan, ModelPlan()),
        "aux_train": sub("aux_train", lambda d: AuxTrainConfig(**d), AuxTrainConfig(epochs=20)),
        "matcher_train": sub("matcher_train", lambda d: MatcherTrainConfig(**d),
                             MatcherTrainConfig(epochs=30)),
        "pretrain": sub("pretrain", train, TrainConfig(epochs=40, batch_size=64)),
        "ensemble_train": sub("ensemble_train", train, TrainConfig(epochs=15, batch_size=64)),
        "flow_train": sub("flow_train", train, TrainConfig(epochs=10, batch_size=64)),
        "eval": sub("eval", eval_plan, EvalPlan()),
    }
    kwargs.update(payload)  # remaining scalars: seed, n_members, replication
    return RunConfig(**kwargs)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))
