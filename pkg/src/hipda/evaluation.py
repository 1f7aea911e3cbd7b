"""Discrimination metrics, paired significance tests and the ablation harness.

This is the only module that reads target outcomes, and only from the
held-out evaluation partition.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import losses as L
from .cohort import CohortTable, require_no_outcome
from .network import predict_proba
from .stats import mean_sd, t_sf_two_sided
from .trainer import TrainConfig, train_many

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_THRESHOLD = 0.5
METRIC_NAMES = ("auc", "accuracy", "sensitivity", "specificity", "precision", "f1")


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("AUC is undefined unless both classes are present")
    return s, y, n_pos, y.size - n_pos


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant pairs + 0.5 * tied pairs) / (n_pos * n_neg)."""
    s, y, n_pos, n_neg = _scores_labels(scores, labels)
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricSet:
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    threshold: float = DEFAULT_THRESHOLD
    precision_undefined: bool = False
    f1_undefined: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_metrics(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> MetricSet:
    """Threshold metrics (prediction = score >= threshold) plus AUC."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s, y, n_pos, n_neg = _scores_labels(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = n_neg - fp
    fn = n_pos - tp
    sens = tp / n_pos
    spec = tn / n_neg
    prec_undef = tp + fp == 0
    prec = 0.0 if prec_undef else tp / (tp + fp)
    f1_undef = prec + sens == 0
    f1 = 0.0 if f1_undef else 2 * prec * sens / (prec + sens)
    return MetricSet(auc(s, y), (tp + tn) / y.size, sens, spec, prec, f1, threshold, prec_undef, f1_undef)


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    degenerate: bool = False


def paired_t_test(diffs: Sequence[float]) -> TTestResult:
    """One-sample t-test on paired differences, two-sided.

    Zero sample variance is reported as degenerate with ``p = nan``.
    """
    d = np.asarray(diffs, dtype=float)
    n = d.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 differences")
    mu, sd = mean_sd(d)
    if sd == 0.0:
        return TTestResult(math.nan, n - 1, math.nan, True)
    t = mu / (sd / math.sqrt(n))
    return TTestResult(t, n - 1, t_sf_two_sided(t, n - 1))


def format_p(p: float | None) -> str:
    if p is None:
        return "–"
    if math.isnan(p):
        return "n/a"
    if p < 1e-4:
        return "<0.0001"
    return f"{p:.4f}"


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    flags: L.Flags
    seeds: list[int]
    per_seed: list[MetricSet]
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)
    delta_auc: float = 0.0
    t: float | None = None
    p: float | None = None
    degenerate: bool = False

    @property
    def aucs(self) -> list[float]:
        return [m.auc for m in self.per_seed]

    @property
    def name(self) -> str:
        return "+".join(n.upper() for n in self.flags.as_list()) or "Baseline"

    def to_dict(self) -> dict:
        return {
            "method": self.name, "flags": self.flags.as_list(), "seeds": self.seeds,
            "auc_per_seed": self.aucs, "mean": self.mean, "sd": self.sd,
            "delta_auc": self.delta_auc, "t": self.t, "p": self.p, "degenerate": self.degenerate,
            "per_seed": [m.as_dict() for m in self.per_seed],
        }


def aggregate_row(flags: L.Flags, seeds: Sequence[int], per_seed: list[MetricSet],
                  baseline: "AblationRow | None") -> AblationRow:
    row = AblationRow(flags, list(seeds), per_seed)
    for name in METRIC_NAMES:
        row.mean[name], row.sd[name] = mean_sd([getattr(m, name) for m in per_seed])
    if baseline is not None:
        row.delta_auc = row.mean["auc"] - baseline.mean["auc"]
        if len(per_seed) >= 2:
            res = paired_t_test(np.array(row.aucs) - np.array(baseline.aucs))
            row.t, row.p, row.degenerate = res.t, res.p, res.degenerate
    return row


def run_ablation(source: CohortTable, target_pseudo: CohortTable, target_eval: CohortTable,
                 base_config: TrainConfig, seeds: Sequence[int] = DEFAULT_SEEDS,
                 combinations: Sequence[L.Flags] = L.ALL_COMBINATIONS,
                 threshold: float = DEFAULT_THRESHOLD, n_jobs: int = 1) -> list[AblationRow]:
    """Train every (flag combination, seed) pair and score the evaluation partition.

    The first combination is the baseline that every other row is compared
    against with a paired t-test over seeds.
    """
    require_no_outcome(target_pseudo, "pseudo-training target")
    if target_eval.y is None:
        raise ValueError("evaluation partition needs outcomes")
    combos = list(combinations)
    if not combos or combos[0].any:
        raise ValueError("the first combination must be the baseline (no flags)")
    cfg_dict = base_config.to_dict()
    cfg_dict.pop("weights")
    jobs = []
    for flags in combos:
        for seed in seeds:
            cfg = TrainConfig.from_dict({**cfg_dict, "flags": flags, "seed": int(seed)})
            jobs.append((source, target_pseudo, cfg))
    models = train_many(jobs, n_jobs)

    rows: list[AblationRow] = []
    k = 0
    for flags in combos:
        per_seed = []
        for _ in seeds:
            scores = predict_proba(models[k].params, target_eval.X)
            per_seed.append(confusion_metrics(scores, target_eval.y, threshold))
            k += 1
        rows.append(aggregate_row(flags, seeds, per_seed, rows[0] if rows else None))
    return rows


# ---------------------------------------------------------------------------
# output


def render_table(rows: Sequence[AblationRow], title: str = "") -> str:
    """Plain-text table: MMD | CORAL | GRL/DANN | MLP | AUC | metrics | dAUC | p."""
    header = ["MMD", "CORAL", "GRL/DANN", "MLP (Baseline)", "AUC (mean ± SD)",
              "Performance", "ΔAUC", "P-value"]
    body = []
    for i, r in enumerate(rows):
        perf = "  ".join(f"{n.capitalize() if n != 'f1' else 'F1-score'}: {r.mean[n]:.2f} ± {r.sd[n]:.2f}"
                         for n in METRIC_NAMES[1:])
        body.append([
            "✓" if r.flags.mmd else "", "✓" if r.flags.coral else "", "✓" if r.flags.dann else "",
            "✓ (Baseline)" if i == 0 else "✓",
            f"{r.mean['auc']:.2f} ± {r.sd['auc']:.2f}", perf,
            "–" if i == 0 else f"{r.delta_auc:.2f}",
            "–" if i == 0 else format_p(r.p),
        ])
    widths = [max(len(h), *(len(b[j]) for b in body)) for j, h in enumerate(header)]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    lines = ([title] if title else []) + [fmt(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def write_csv(rows: Sequence[AblationRow], path) -> None:
    seeds = rows[0].seeds if rows else []
    cols = ["method", "mmd", "coral", "dann"] + [f"auc_seed{s}" for s in seeds]
    cols += [f"{n}_{stat}" for n in METRIC_NAMES for stat in ("mean", "sd")]
    cols += ["delta_auc", "t", "p"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, r in enumerate(rows):
            vals = [r.name, int(r.flags.mmd), int(r.flags.coral), int(r.flags.dann)]
            vals += [repr(a) for a in r.aucs]
            for n in METRIC_NAMES:
                vals += [repr(r.mean[n]), repr(r.sd[n])]
            vals += ["–" if i == 0 else repr(r.delta_auc),
                     "" if r.t is None else repr(r.t),
                     "–" if i == 0 else format_p(r.p)]
            w.writerow(vals)


def write_json(rows: Sequence[AblationRow], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
