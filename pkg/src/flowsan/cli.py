"""Command-line experiment runner.

Verbs: gen-data, train {aux,ensemble,flowsan}, evaluate, demo. Every command
is a pure function of (config, seed); artifact directories are append-only:
a completed stage is skipped with an "up to date" notice rather than being
rewritten.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import inference, metrics, training
from .config import (
    EvalSettings,
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .data import (
    compute_prototypes,
    generate_dataset,
    load_dataset,
    partition_dataset,
    resample_for_diversity,
    save_dataset,
    seed_for,
    spec_fingerprint,
    SPLIT_NAMES,
)
from .exceptions import ConfigurationError, FlowSanError, UsageError
from .models import (
    AuxTrainConfig,
    MatcherTrainConfig,
    load_model,
    save_model,
    train_face_matcher,
    train_gender_classifier,
)


# ---------------------------------------------------------------------------
# artifact paths
# ---------------------------------------------------------------------------

def dataset_dir(out: Path, index: int, split: str) -> Path:
    return out / "data" / f"ds{index}" / split


def model_dir(out: Path, name: str) -> Path:
    return out / "models" / name


def run_dir(out: Path, regime: str) -> Path:
    return out / "runs" / regime


def _load_split(out: Path, index: int, split: str):
    path = dataset_dir(out, index, split)
    if not (path / "manifest.json").exists():
        raise ConfigurationError(f"missing dataset {path}; run `gen-data` first")
    return load_dataset(path)


def _prototypes(out: Path):
    return compute_prototypes(_load_split(out, 0, "san-train"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    for index in range(cfg.data.n_eval_datasets):
        spec = cfg.data.spec(cfg.seed, index)
        up_to_date = True
        for split in SPLIT_NAMES:
            manifest = dataset_dir(out, index, split) / "manifest.json"
            if not manifest.exists():
                up_to_date = False
                break
            with open(manifest) as fh:
                if json.load(fh).get("fingerprint") != spec_fingerprint(spec, split):
                    up_to_date = False
                    break
        if up_to_date:
            print(f"ds{index}: up to date")
            continue
        pool = generate_dataset(spec)
        for split, ds in partition_dataset(pool).items():
            save_dataset(ds, dataset_dir(out, index, split))
        print(f"ds{index}: wrote {spec.n_identities} identities "
              f"x {spec.samples_per_identity} samples at {spec.h}x{spec.w}")


def _train_aux(cfg: RunConfig, out: Path) -> None:
    aux_train = _load_split(out, 0, "aux-train")

    for i in range(cfg.n_members):
        target = model_dir(out, f"aux_classifier_{i}")
        if (target / "weights.json").exists():
            print(f"aux_classifier_{i}: up to date")
            continue
        variant = resample_for_diversity(aux_train, i, cfg.n_members, cfg.replication)
        arch = cfg.models.aux_classifiers[i % len(cfg.models.aux_classifiers)]
        clf = train_gender_classifier(
            variant,
            AuxTrainConfig(epochs=cfg.aux_train.epochs, batch_size=cfg.aux_train.batch_size,
                           lr=cfg.aux_train.lr, seed=seed_for(cfg.seed, "aux-clf", i),
                           val_fraction=cfg.aux_train.val_fraction,
                           min_train_auc=cfg.aux_train.min_train_auc),
            arch=arch)
        save_model(clf, target)
        print(f"aux_classifier_{i}: val AUC {clf.val_auc:.3f}")

    target = model_dir(out, "aux_matcher")
    if not (target / "weights.json").exists():
        matcher = train_face_matcher(
            aux_train,
            MatcherTrainConfig(epochs=cfg.matcher_train.epochs,
                               batch_size=cfg.matcher_train.batch_size,
                               lr=cfg.matcher_train.lr,
                               seed=seed_for(cfg.seed, "aux-matcher"),
                               min_train_auc=cfg.matcher_train.min_train_auc),
            arch=cfg.models.aux_matcher)
        save_model(matcher, target)
        print("aux_matcher: done")
    else:
        print("aux_matcher: up to date")

    n_ds = cfg.data.n_eval_datasets
    for i, arch in enumerate(cfg.models.unseen_classifiers):
        target = model_dir(out, f"unseen_classifier_{i}")
        if (target / "weights.json").exists():
            print(f"unseen_classifier_{i}: up to date")
            continue
        ds = _load_split(out, i % n_ds, "unseen-train")
        clf = train_gender_classifier(
            ds,
            AuxTrainConfig(epochs=cfg.aux_train.epochs, batch_size=cfg.aux_train.batch_size,
                           lr=cfg.aux_train.lr, seed=seed_for(cfg.seed, "unseen-clf", i),
                           val_fraction=cfg.aux_train.val_fraction,
                           min_train_auc=cfg.aux_train.min_train_auc),
            arch=arch)
        save_model(clf, target)
        print(f"unseen_classifier_{i}: val AUC {clf.val_auc:.3f}")

    for i, arch in enumerate(cfg.models.unseen_matchers):
        target = model_dir(out, f"unseen_matcher_{i}")
        if (target / "weights.json").exists():
            print(f"unseen_matcher_{i}: up to date")
            continue
        ds = _load_split(out, i % n_ds, "unseen-train")
        matcher = train_face_matcher(
            ds,
            MatcherTrainConfig(epochs=cfg.matcher_train.epochs,
                               batch_size=cfg.matcher_train.batch_size,
                               lr=cfg.matcher_train.lr,
                               seed=seed_for(cfg.seed, "unseen-matcher", i),
                               min_train_auc=cfg.matcher_train.min_train_auc),
            arch=arch)
        save_model(matcher, target)
        print(f"unseen_matcher_{i}: done")


def _require(path: Path, hint: str) -> None:
    if not path.exists():
        raise ConfigurationError(f"missing prerequisite {path} ({hint})")


def _load_aux_models(cfg: RunConfig, out: Path):
    classifiers = []
    for i in range(cfg.n_members):
        path = model_dir(out, f"aux_classifier_{i}")
        _require(path / "weights.json", "run `train aux` first")
        classifiers.append(load_model(path))
    path = model_dir(out, "aux_matcher")
    _require(path / "weights.json", "run `train aux` first")
    return classifiers, load_model(path)


def _train_cfg_with_seed(base: training.TrainConfig, seed: int) -> training.TrainConfig:
    return training.TrainConfig(epochs=base.epochs, batch_size=base.batch_size,
                                seed=seed, weights=base.weights, lr=base.lr,
                                betas=base.betas, eps=base.eps, scheme=base.scheme,
                                arch=base.arch)


def _train_ensemble(cfg: RunConfig, out: Path) -> None:
    rdir = run_dir(out, "ensemble")
    if (rdir / "run.json").exists():
        print("ensemble: up to date")
        return
    classifiers, matcher = _load_aux_models(cfg, out)
    san_train = _load_split(out, 0, "san-train")
    prototypes = _prototypes(out)
    base_dir = rdir / "base"
    if (base_dir / "weights.json").exists():
        base = load_model(base_dir, frozen=False)
        print("recon base: up to date")
    else:
        base = training.pretrain_autoencoder(
            san_train, prototypes,
            _train_cfg_with_seed(cfg.pretrain, seed_for(cfg.seed, "pretrain")))
        save_model(base, base_dir)
        print(f"recon base: pretrained {cfg.pretrain.epochs} epochs")
    chain = training.train_ensemble(
        san_train, classifiers, matcher, prototypes,
        _train_cfg_with_seed(cfg.ensemble_train, seed_for(cfg.seed, "ensemble")),
        init=base)
    training.save_chain(chain, rdir, config_payload={
        "regime": "ensemble", "config": config_to_dict(cfg),
        "weights": [cfg.ensemble_train.weights.pixel, cfg.ensemble_train.weights.match,
                    cfg.ensemble_train.weights.gender],
        "scheme": cfg.ensemble_train.scheme})
    print(f"ensemble: trained {len(chain.members)} members")


def _train_flowsan(cfg: RunConfig, out: Path) -> None:
    rdir = run_dir(out, "flowsan")
    if (rdir / "run.json").exists():
        print("flowsan: up to date")
        return
    ensemble_dir = run_dir(out, "ensemble")
    _require(ensemble_dir / "members", "run `train ensemble` first")
    init_chain = training.load_chain(ensemble_dir)
    classifiers, matcher = _load_aux_models(cfg, out)
    san_train = _load_split(out, 0, "san-train")
    prototypes = _prototypes(out)
    chain = training.train_flowsan(
        san_train, classifiers, matcher, prototypes,
        _train_cfg_with_seed(cfg.flow_train, seed_for(cfg.seed, "flowsan")),
        init_chain=init_chain, run_dir=rdir)
    training.save_chain(chain, rdir, config_payload={
        "regime": "flowsan", "config": config_to_dict(cfg),
        "weights": [cfg.flow_train.weights.pixel, cfg.flow_train.weights.match,
                    cfg.flow_train.weights.gender],
        "scheme": cfg.flow_train.scheme})
    print(f"flowsan: trained {len(chain.members)} members")


def cmd_train(cfg: RunConfig, out: Path, regime: str) -> None:
    cfg.validate()
    if regime == "aux":
        _train_aux(cfg, out)
    elif regime == "ensemble":
        _train_ensemble(cfg, out)
    elif regime == "flowsan":
        _train_flowsan(cfg, out)
    else:
        raise UsageError(f"unknown regime {regime!r}; pick aux, ensemble or flowsan")


def _load_unseen(cfg: RunConfig, out: Path):
    classifiers = {}
    for i in range(len(cfg.models.unseen_classifiers)):
        path = model_dir(out, f"unseen_classifier_{i}")
        _require(path / "weights.json", "run `train aux` first")
        classifiers[f"unseen_clf_{i}"] = load_model(path)
    matchers = {}
    for i in range(len(cfg.models.unseen_matchers)):
        path = model_dir(out, f"unseen_matcher_{i}")
        _require(path / "weights.json", "run `train aux` first")
        matchers[f"unseen_matcher_{i}"] = load_model(path)
    return classifiers, matchers


def cmd_evaluate(cfg: RunConfig, out: Path, depths=None, fmrs=None) -> metrics.EvalReport:
    cfg.validate()
    depths = tuple(depths) if depths else cfg.eval.depths
    fmrs = tuple(fmrs) if fmrs else cfg.eval.fmrs
    chains = {}
    for regime in ("ensemble", "flowsan"):
        rdir = run_dir(out, regime)
        _require(rdir / "run.json", f"run `train {regime}` first")
        chains[regime] = training.load_chain(rdir)
    classifiers, matchers = _load_unseen(cfg, out)
    datasets = {f"eval{i}": _load_split(out, i, "eval")
                for i in range(cfg.data.n_eval_datasets)}
    settings = EvalSettings(n_impostor=cfg.eval.n_impostor, fmrs=fmrs,
                            seed=seed_for(cfg.seed, "eval"),
                            prototypes=_prototypes(out))
    report = metrics.evaluate_suite(chains, classifiers, matchers, datasets,
                                    depths, settings)

    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    report.to_csv(reports / "report.csv")
    report.to_json(reports / "report.json", config=config_to_dict(cfg))
    metrics.plot_report(report, reports / "plots",
                        fmr=0.01 if 0.01 in fmrs else fmrs[-1])
    table_depths = tuple(d for d in (3, 5) if d in depths) or depths[-1:]
    summary = report.summary_table(depths=table_depths,
                                   fmr=0.01 if 0.01 in fmrs else fmrs[-1])
    (reports / "summary.txt").write_text(summary + "\n")
    print(summary)
    return report


def cmd_demo(cfg: RunConfig, out: Path, image_ref: str, label: str = "auto") -> None:
    cfg.validate()
    rdir = run_dir(out, "flowsan")
    _require(rdir / "run.json", "run `train flowsan` first")
    chain = training.load_chain(rdir)
    prototypes = _prototypes(out)
    classifiers, matchers = _load_unseen(cfg, out)
    clf = classifiers["unseen_clf_0"]
    matcher = matchers["unseen_matcher_0"]

    if image_ref.startswith("eval:"):
        ds = _load_split(out, 0, "eval")
        idx = int(image_ref.split(":", 1)[1])
        if not (0 <= idx < len(ds)):
            raise UsageError(f"eval index {idx} outside 0..{len(ds) - 1}")
        image = ds.samples[idx].image
        true_label = ds.samples[idx].gender
    else:
        path = Path(image_ref)
        try:
            image = inference.read_pgm(path)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read image {path}: {exc}") from exc
        true_label = None

    if label == "auto":
        y = true_label if true_label is not None else inference.predict_label(clf, image)
    else:
        y = int(label)

    trace = inference.psi_trace(chain, image, prototypes, y)
    demo_dir = out / "demo"
    demo_dir.mkdir(parents=True, exist_ok=True)
    inference.export_trace_grid(trace, demo_dir / "trace.pgm")

    from .models import match_score
    lines = [f"label y={y} (1=male); panels: original + depth 1..{len(trace.outputs)}",
             f"original: P(Male)={float(clf.predict_proba(image)):.4f}"]
    for t, out_img in enumerate(trace.outputs, start=1):
        p = float(clf.predict_proba(out_img))
        score = match_score(matcher, image, out_img)
        lines.append(f"depth {t}: P(Male)={p:.4f} match_score={score:.4f}")
    (demo_dir / "trace.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_depths(text: str) -> tuple[int, ...]:
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(x) for x in text.split(","))


def _parse_fmrs(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowsan",
                                     description="Gender-privacy perturbation experiments")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data")
    p_train = sub.add_parser("train")
    p_train.add_argument("regime", choices=["aux", "ensemble", "flowsan"])
    p_eval = sub.add_parser("evaluate")
    p_eval.add_argument("--depths", type=_parse_depths, default=None, help="e.g. 1..5 or 1,3,5")
    p_eval.add_argument("--fmr", type=_parse_fmrs, default=None, help="e.g. 0.001,0.01")
    p_demo = sub.add_parser("demo")
    p_demo.add_argument("image", help="PGM path or eval:IDX")
    p_demo.add_argument("--label", default="auto", help="0, 1 or auto")
    return parser


def resolve_config(args) -> RunConfig:
    import dataclasses
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    out = args.out
    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.regime)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, depths=args.depths, fmrs=args.fmr)
        elif args.command == "demo":
            cmd_demo(cfg, out, args.image, label=args.label)
        out.mkdir(parents=True, exist_ok=True)
        config_path = out / "config.json"
        if not config_path.exists():
            save_config(cfg, config_path)
    except FlowSanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
