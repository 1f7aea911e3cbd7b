"""Outcome-free hyperparameter selection.

Every grid configuration is trained with the same seed; the winner is the
configuration whose source and target embeddings are closest in MMD^2.
Target outcomes are never read: the target table must arrive without them.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from .cohort import CohortTable, require_no_outcome
from .network import embed
from .trainer import MALE_BATCH_SIZE, TrainConfig, TrainedModel, train

log = logging.getLogger(__name__)

COLLAPSE_VARIANCE = 1e-8


@dataclass
class GridSpec:
    lrs: Sequence[float] = (5e-4, 1e-3, 2e-3)
    weight_decays: Sequence[float] = (1e-5, 1e-4, 5e-4)
    batch_sizes: Sequence[int] = (64, 128, 256)
    sizes: Sequence[int] = (128, 256, 512)
    profile: str = "female"
    flags: L.Flags = field(default_factory=lambda: L.Flags(True, True, True))
    base: TrainConfig | None = None  # remaining TrainConfig fields (epochs, patience, ...)
    flag_sets: Sequence[L.Flags] | None = None  # optional innermost axis; overrides ``flags``

    def __post_init__(self):
        if isinstance(self.flags, (str, list, tuple)):
            self.flags = L.Flags.parse(self.flags)
        if self.flag_sets is None:
            self.flag_sets = [self.flags]
        self.flag_sets = [f if isinstance(f, L.Flags) else L.Flags.parse(f) for f in self.flag_sets]
        for name in ("lrs", "weight_decays", "batch_sizes", "sizes", "flag_sets"):
            values = list(getattr(self, name))
            if not values:
                raise ValueError(f"grid axis {name!r} is empty")
            setattr(self, name, values)
        if self.profile == "male":
            self.batch_sizes = [MALE_BATCH_SIZE]

    @property
    def size(self) -> int:
        return (len(self.lrs) * len(self.weight_decays) * len(self.batch_sizes)
                * len(self.sizes) * len(self.flag_sets))


def enumerate_grid(spec: GridSpec, seed: int = 0) -> list[TrainConfig]:
    """Cartesian product, learning rate outermost, then weight decay, batch size, width, flags.

    The normalization kind always follows the grid's sex profile.
    """
    base = spec.base if spec.base is not None else TrainConfig()
    axes = (spec.lrs, spec.weight_decays, spec.batch_sizes, spec.sizes, spec.flag_sets)
    return [replace(base, lr=float(lr), weight_decay=float(wd), batch_size=int(bs), hidden=int(size),
                    profile=spec.profile, flags=flags, seed=int(seed), norm=None)
            for lr, wd, bs, size, flags in itertools.product(*axes)]


def delta_criterion(model: TrainedModel, source: CohortTable, target: CohortTable) -> float:
    """MMD^2 between eval-mode embeddings of every source row and every target row."""
    require_no_outcome(target, "selection target")
    H_s = embed(model.params, source.X)
    H_t = embed(model.params, target.X)
    return L.mmd2_multiscale(H_s, H_t)


def embedding_variance(model: TrainedModel, *tables: CohortTable) -> float:
    H = np.vstack([embed(model.params, t.X) for t in tables])
    return float(H.var(axis=0).sum())


@dataclass
class SelectionRecord:
    index: int
    lr: float
    weight_decay: float
    batch_size: int
    hidden: int
    flags: str
    delta: float
    val_loss: float
    best_epoch: int
    runtime_s: float
    status: str = "ok"  # ok | collapsed | failed
    message: str = ""

    def eta(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay,
                "batch_size": self.batch_size, "hidden": self.hidden, "flags": self.flags}


@dataclass
class SelectionReport:
    records: list[SelectionRecord]
    winner: int
    tie_break: str
    seed: int
    profile: str

    @property
    def best(self) -> SelectionRecord:
        return self.records[self.winner]

    def to_dict(self, runtimes: bool = False) -> dict:
        """Serializable form; runtimes are machine-dependent and excluded unless asked for."""
        recs = [dict(r.__dict__) for r in self.records]
        if not runtimes:
            for r in recs:
                r.pop("runtime_s")
        return {
            "seed": self.seed, "profile": self.profile,
            "winner": self.winner, "winner_eta": self.best.eta(), "tie_break": self.tie_break,
            "records": recs,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        cols = ["index", "lr", "weight_decay", "batch_size", "hidden", "flags", "delta", "val_loss",
                "best_epoch", "status", "winner"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([r.index, repr(r.lr), repr(r.weight_decay), r.batch_size, r.hidden, r.flags,
                            repr(r.delta), repr(r.val_loss), r.best_epoch, r.status,
                            int(r.index == self.winner)])


def _evaluate_config(job) -> tuple[float, float, int, str, str]:
    source, target, cfg = job
    try:
        model = train(source, target, cfg)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return math.nan, math.nan, -1, "failed", str(exc)
    if embedding_variance(model, source, target) < COLLAPSE_VARIANCE:
        return math.nan, model.best_val_loss, model.best_epoch, "collapsed", "embedding variance below threshold"
    return delta_criterion(model, source, target), model.best_val_loss, model.best_epoch, "ok", ""


def _timed(job):
    t0 = time.perf_counter()
    out = _evaluate_config(job)
    return out + (time.perf_counter() - t0,)


def select(source: CohortTable, target_pseudo: CohortTable, grid: GridSpec, seed: int = 0,
           n_jobs: int = 1) -> SelectionReport:
    """Train each grid point and keep the minimum-Delta configuration.

    Collapsed extractors (near-zero embedding variance) are disqualified.
    Ties on Delta go to the lower source validation loss, then to grid order.
    """
    require_no_outcome(target_pseudo, "selection target")
    configs = enumerate_grid(grid, seed)
    jobs = [(source, target_pseudo, c) for c in configs]
    if n_jobs > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_timed, jobs))
    else:
        results = [_timed(j) for j in jobs]

    records = []
    for i, (cfg, (delta, val, epoch, status, msg, secs)) in enumerate(zip(configs, results)):
        records.append(SelectionRecord(i, cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.hidden,
                                       str(cfg.flags), delta, val, epoch, secs, status, msg))
        log.info("config %d/%d lr=%g wd=%g bs=%d p=%d -> delta=%.6g (%s)", i + 1, len(configs),
                 cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.hidden, delta, status)

    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise RuntimeError("no configuration completed: "
                           + "; ".join(f"#{r.index} {r.status}: {r.message}" for r in records))
    best_delta = min(r.delta for r in ok)
    tied = [r for r in ok if r.delta == best_delta]
    tied.sort(key=lambda r: (r.val_loss, r.index))
    winner = tied[0]
    if len(tied) == 1:
        note = "unique minimum"
    else:
        note = f"{len(tied)} configs tied on delta; chose lowest validation loss, then grid order"
    return SelectionReport(records, winner.index, note, seed, grid.profile)
