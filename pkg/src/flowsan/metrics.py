"""Biometric evaluation: ROC/AUC, EER, TMR@FMR, the genuine/impostor match
protocol, and the depth-sweep privacy/utility report."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import FaceDataset, seed_for
from .exceptions import ConfigurationError, DegenerateInputError

POSITIVE_GENDER = 1  # scores are P(Male); male is the positive class


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def _split_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ConfigurationError("scores and labels must align")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateInputError("both classes are required")
    return pos, neg


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group mean."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted half
    (rank / Mann-Whitney formulation)."""
    pos, neg = _split_scores(scores, labels)
    all_scores = np.concatenate([pos, neg])
    ranks = _average_ranks(all_scores)
    rank_sum = ranks[:len(pos)].sum()
    n_pos, n_neg = len(pos), len(neg)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _roc_vertices(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Operating points (FPR_k, FNR_k) swept from the strictest threshold
    (predict nothing positive) to the most permissive."""
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    boundaries = np.flatnonzero(np.diff(scores)) + 1
    tp = np.concatenate([[0.0], np.cumsum(labels)[np.concatenate([boundaries - 1, [len(scores) - 1]])]])
    fp = np.concatenate([[0.0], np.cumsum(1 - labels)[np.concatenate([boundaries - 1, [len(scores) - 1]])]])
    fpr = fp / len(neg)
    fnr = 1.0 - tp / len(pos)
    return fpr, fnr


def eer(scores, labels) -> float:
    """Error rate where FPR = FNR, linearly interpolated between the adjacent
    ROC operating points when no exact crossing exists."""
    pos, neg = _split_scores(scores, labels)
    fpr, fnr = _roc_vertices(pos, neg)
    diff = fnr - fpr  # starts at +1 (nothing predicted positive), ends <= 0
    for k in range(len(diff) - 1):
        if diff[k] == 0.0:
            return float(fpr[k])
        if diff[k] > 0.0 >= diff[k + 1]:
            denom = diff[k] - diff[k + 1]
            alpha = diff[k] / denom
            return float(fpr[k] + alpha * (fpr[k + 1] - fpr[k]))
    return float(fpr[-1])


def tmr_at_fmr(genuine, impostor, fmr: float) -> float:
    """True-match rate at the threshold set by the interpolated (1-fmr)
    quantile of the impostor scores.

    If the impostor set is too small to resolve `fmr`, warns and reports at
    the coarsest resolvable rate instead.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if len(genuine) == 0 or len(impostor) == 0:
        raise DegenerateInputError("genuine and impostor score lists must be non-empty")
    if not (0.0 < fmr < 1.0):
        raise ConfigurationError(f"fmr must lie in (0,1), got {fmr}")
    if len(impostor) < 1.0 / fmr:
        coarsest = 1.0 / len(impostor)
        warnings.warn(
            f"{len(impostor)} impostor scores cannot resolve FMR={fmr:g}; "
            f"reporting at FMR={coarsest:g}", stacklevel=2)
        fmr = coarsest
    threshold = np.quantile(impostor, 1.0 - fmr, method="linear")
    return float(np.mean(genuine >= threshold))


# ---------------------------------------------------------------------------
# genuine / impostor protocol
# ---------------------------------------------------------------------------

@dataclass
class MatchPairs:
    """Ordered index pairs into a dataset: (probe a, reference b)."""
    genuine: np.ndarray   # [G, 2]
    impostor: np.ndarray  # [K, 2]


def build_pair_indices(dataset: FaceDataset, n_impostor: int, seed: int) -> MatchPairs:
    """All ordered same-identity pairs (a != b) plus a seeded sample of
    cross-identity pairs. Identities with a single sample are skipped."""
    ids = dataset.identities()
    by_identity: dict[int, list[int]] = {}
    for i, identity in enumerate(ids):
        by_identity.setdefault(int(identity), []).append(i)

    genuine = []
    for identity, idxs in sorted(by_identity.items()):
        if len(idxs) < 2:
            warnings.warn(f"identity {identity} has a single sample; skipped", stacklevel=2)
            continue
        for a in idxs:
            for b in idxs:
                if a != b:
                    genuine.append((a, b))
    if not genuine:
        raise DegenerateInputError("no identity has two samples; cannot build genuine pairs")
    if len(by_identity) < 2:
        raise DegenerateInputError("need at least two identities for impostor pairs")

    rng = np.random.default_rng(seed)
    n = len(dataset.samples)
    impostor = []
    while len(impostor) < n_impostor:
        a, b = rng.integers(0, n, size=2)
        if ids[a] != ids[b]:
            impostor.append((int(a), int(b)))
    return MatchPairs(genuine=np.array(genuine, dtype=np.int64),
                      impostor=np.array(impostor, dtype=np.int64))


def cosine_scores(rep_a: np.ndarray, rep_b: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Cosine similarity for each (a, b) index pair; rep_a holds probe-side
    representations, rep_b reference-side."""
    a = rep_a[pairs[:, 0]]
    b = rep_b[pairs[:, 1]]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("zero-norm representation vector")
    return np.einsum("ij,ij->i", a, b) / (na * nb)


def build_match_protocol(dataset: FaceDataset, perturb, n_impostor: int = 20000,
                         seed: int = 0) -> tuple[list, list]:
    """Materialized (original, perturbed) image pairs.

    genuine: (original of a, perturbed of a different same-identity b);
    impostor: (original of a, perturbed of a cross-identity b), sampled to
    n_impostor with a seeded RNG.
    """
    pairs = build_pair_indices(dataset, n_impostor, seed)
    originals = dataset.images()
    perturbed = perturb(originals)
    genuine = [(originals[a], perturbed[b]) for a, b in pairs.genuine]
    impostor = [(originals[a], perturbed[b]) for a, b in pairs.impostor]
    return genuine, impostor


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

@dataclass
class GenderRow:
    chain_id: str
    mode: str
    depth: int
    dataset: str
    model: str
    auc: float
    eer: float
    gap: float


@dataclass
class MatchRow:
    chain_id: str
    mode: str
    depth: int
    dataset: str
    model: str
    fmr: float
    tmr: float


@dataclass
class EvalReport:
    gender_rows: list[GenderRow] = field(default_factory=list)
    match_rows: list[MatchRow] = field(default_factory=list)

    def gender_aggregate(self, mode: str, depth: int, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.gender_rows
                if r.mode == mode and r.depth == depth]
        if not vals:
            raise KeyError(f"no gender rows for mode={mode} depth={depth}")
        return float(np.mean(vals))

    def match_aggregate(self, mode: str, depth: int, fmr: float) -> float:
        vals = [r.tmr for r in self.match_rows
                if r.mode == mode and r.depth == depth and abs(r.fmr - fmr) < 1e-12]
        if not vals:
            raise KeyError(f"no match rows for mode={mode} depth={depth} fmr={fmr}")
        return float(np.mean(vals))

    def aggregates(self) -> dict:
        gender = []
        for mode, depth in sorted({(r.mode, r.depth) for r in self.gender_rows}):
            gender.append({
                "mode": mode, "depth": depth,
                "auc_mean": self.gender_aggregate(mode, depth, "auc"),
                "eer_mean": self.gender_aggregate(mode, depth, "eer"),
                "gap_mean": self.gender_aggregate(mode, depth, "gap"),
            })
        match = []
        for mode, depth, fmr in sorted({(r.mode, r.depth, r.fmr) for r in self.match_rows}):
            match.append({
                "mode": mode, "depth": depth, "fmr": fmr,
                "tmr_mean": self.match_aggregate(mode, depth, fmr),
            })
        return {"gender": gender, "match": match}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain_id", "mode", "depth", "dataset", "model", "metric", "value"])
            for r in self.gender_rows:
                for metric in ("auc", "eer", "gap"):
                    writer.writerow([r.chain_id, r.mode, r.depth, r.dataset, r.model,
                                     metric, repr(getattr(r, metric))])
            for r in self.match_rows:
                writer.writerow([r.chain_id, r.mode, r.depth, r.dataset, r.model,
                                 f"tmr@fmr={r.fmr:g}", repr(r.tmr)])

    def to_json(self, path, config: dict | None = None) -> None:
        payload = {
            "gender_rows": [asdict(r) for r in self.gender_rows],
            "match_rows": [asdict(r) for r in self.match_rows],
            "aggregates": self.aggregates(),
        }
        if config is not None:
            payload["config"] = config
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @staticmethod
    def from_json(path) -> "EvalReport":
        with open(path) as fh:
            payload = json.load(fh)
        return EvalReport(
            gender_rows=[GenderRow(**r) for r in payload["gender_rows"]],
            match_rows=[MatchRow(**r) for r in payload["match_rows"]],
        )

    def summary_table(self, depths: tuple[int, ...] = (3, 5), fmr: float = 0.01) -> str:
        """Headline table: rows Orig / Ens-Avg / Ens-Gibbs / Ens-Best / FlowSAN,
        columns gender EER and matcher TMR at the requested depths."""
        mode_labels = [("orig", "Orig."), ("ens-avg", "Ens-Avg"), ("ens-gibbs", "Ens-Gibbs"),
                       ("ens-best", "Ens-Best"), ("flowsan", "FlowSAN")]
        header = f"{'':<10}" + "".join(f"EER n={d:<4}" for d in depths) \
            + "".join(f"TMR n={d:<4}" for d in depths)
        lines = [header]
        for mode, label in mode_labels:
            cells = []
            for d in depths:
                depth = 0 if mode == "orig" else d
                try:
                    cells.append(f"{self.gender_aggregate(mode, depth, 'eer'):9.3f}")
                except KeyError:
                    cells.append(f"{'--':>9}")
            for d in depths:
                depth = 0 if mode == "orig" else d
                try:
                    cells.append(f"{self.match_aggregate(mode, depth, fmr):9.3f}")
                except KeyError:
                    cells.append(f"{'--':>9}")
            lines.append(f"{label:<10}" + "".join(cells))
        return "\n".join(lines)


def evaluate_suite(chains, classifiers_unseen: dict, matchers_unseen: dict,
                   datasets_eval: dict[str, FaceDataset], depths, cfg) -> EvalReport:
    """Full depth-sweep evaluation (gender AUC/EER per unseen classifier,
    TMR@FMR per unseen matcher) for every chain/mode/depth/dataset cell,
    plus the original-image baseline rows at depth 0.

    `chains` is a dict chain_id -> SanChain; `cfg` is an EvalSettings.
    """
    from . import inference  # local import: inference depends on models, not on us

    report = EvalReport()
    for ds_name, ds in sorted(datasets_eval.items()):
        originals = ds.images()
        labels = ds.genders()
        pairs = build_pair_indices(ds, cfg.n_impostor, seed_for(cfg.seed, "pairs", ds_name))

        clf_scores_orig = {name: clf.predict_proba(originals)
                           for name, clf in classifiers_unseen.items()}
        rep_orig = {name: m.represent(originals) for name, m in matchers_unseen.items()}

        for name, scores in sorted(clf_scores_orig.items()):
            auc = roc_auc(scores, labels)
            report.gender_rows.append(GenderRow("-", "orig", 0, ds_name, name,
                                                auc, eer(scores, labels), abs(auc - 0.5)))
        for name, rep in sorted(rep_orig.items()):
            gen = cosine_scores(rep, rep, pairs.genuine)
            imp = cosine_scores(rep, rep, pairs.impostor)
            for fmr in cfg.fmrs:
                report.match_rows.append(MatchRow("-", "orig", 0, ds_name, name,
                                                  fmr, tmr_at_fmr(gen, imp, fmr)))

        for chain_id, chain in sorted(chains.items()):
            n = len(chain.members)
            usable_depths = [t for t in depths if 1 <= t <= n]
            if chain.mode == "flow":
                traces = inference.psi_trace_batch(chain, originals, cfg.prototypes, labels, max(usable_depths))
                mode_outputs = {("flowsan", t): traces[t - 1] for t in usable_depths}
            else:
                member_out = inference.member_outputs(chain, originals, cfg.prototypes, labels)
                mode_outputs = {}
                csum = np.cumsum(member_out, axis=0)
                for t in usable_depths:
                    mode_outputs[("ens-avg", t)] = csum[t - 1] / t
                    rng = np.random.default_rng(seed_for(cfg.seed, "gibbs", ds_name, chain_id, t))
                    picks = rng.integers(0, t, size=len(originals))
                    mode_outputs[("ens-gibbs", t)] = member_out[picks, np.arange(len(originals))]

            for (mode, t), outputs in sorted(mode_outputs.items()):
                for name, clf in sorted(classifiers_unseen.items()):
                    scores = clf.predict_proba(outputs)
                    auc = roc_auc(scores, labels)
                    report.gender_rows.append(GenderRow(chain_id, mode, t, ds_name, name,
                                                        auc, eer(scores, labels), abs(auc - 0.5)))
                for name, matcher in sorted(matchers_unseen.items()):
                    rep_out = matcher.represent(outputs)
                    gen = cosine_scores(rep_orig[name], rep_out, pairs.genuine)
                    imp = cosine_scores(rep_orig[name], rep_out, pairs.impostor)
                    for fmr in cfg.fmrs:
                        report.match_rows.append(MatchRow(chain_id, mode, t, ds_name, name,
                                                          fmr, tmr_at_fmr(gen, imp, fmr)))

            if chain.mode == "ensemble":
                member_probs = {name: np.stack([clf.predict_proba(out) for out in member_out])
                                for name, clf in classifiers_unseen.items()}
                for t in usable_depths:
                    for name, clf in sorted(classifiers_unseen.items()):
                        picks = inference.best_member_indices(member_probs[name][:t], labels)
                        outputs = member_out[picks, np.arange(len(originals))]
                        scores = member_probs[name][picks, np.arange(len(originals))]
                        auc = roc_auc(scores, labels)
                        report.gender_rows.append(GenderRow(chain_id, "ens-best", t, ds_name, name,
                                                            auc, eer(scores, labels), abs(auc - 0.5)))
    return report


def plot_report(report: EvalReport, outdir, fmr: float = 0.01) -> list[Path]:
    """Depth-sweep line charts (metric vs depth per mode) written as PNGs."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    agg = report.aggregates()
    written = []

    def series(rows, key):
        modes = {}
        for row in rows:
            modes.setdefault(row["mode"], []).append((row["depth"], row[key]))
        return {m: sorted(v) for m, v in modes.items() if m != "orig"}

    def baseline(rows, key):
        vals = [row[key] for row in rows if row["mode"] == "orig"]
        return vals[0] if vals else None

    specs = [("gender_auc.png", series(agg["gender"], "auc_mean"),
              baseline(agg["gender"], "auc_mean"), "unseen-classifier AUC"),
             ("gender_eer.png", series(agg["gender"], "eer_mean"),
              baseline(agg["gender"], "eer_mean"), "unseen-classifier EER")]
    match_rows = [r for r in agg["match"] if abs(r["fmr"] - fmr) < 1e-12]
    specs.append((f"matcher_tmr_fmr{fmr:g}.png", series(match_rows, "tmr_mean"),
                  baseline(match_rows, "tmr_mean"), f"unseen-matcher TMR@FMR={fmr:g}"))

    for fname, modes, base, ylabel in specs:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode, points in sorted(modes.items()):
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            ax.plot(xs, ys, marker="o", label=mode)
        if base is not None:
            ax.axhline(base, linestyle="--", color="tab:blue", alpha=0.6, label="orig")
        ax.set_xlabel("stacking depth / ensemble size t")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = outdir / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
