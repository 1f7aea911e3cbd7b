"""Training loop: weighted source batches, paired target batches, AdamW.

One call to :func:`train` is a single deterministic run.  All randomness is
drawn from named child streams of ``SeededRng(config.seed)`` so that, for
example, drawing target batches never shifts the source batch sequence; this is
what makes a baseline run (no alignment flags) identical to a run of the same
loop with the alignment code removed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import losses as L
from .cohort import CohortTable, WeightedBatchSampler, require_no_outcome, stratified_fraction_split
from .network import ModelParams, backward, init_params, predict_proba
from .stats import SeededRng

log = logging.getLogger(__name__)

PROFILES = ("female", "male", "custom")
PROFILE_NORM = {"female": "layer", "male": "batch"}
MALE_BATCH_SIZE = 128
SINGLE_MODULE_LAMBDA = 0.5
MULTI_MODULE_LAMBDA = 0.7
GRL_WEIGHT = {"female": 0.7, "male": 0.8, "custom": 0.7}


def lambda_preset(flags: L.Flags, profile: str = "female",
                  single_module: float = SINGLE_MODULE_LAMBDA) -> L.LossWeights:
    """Alignment weights from the module-count heuristic.

    Two or more modules: MMD and CORAL at 0.7, the domain loss at 0.7 for the
    female profile and 0.8 for the male one.  A lone module gets
    ``single_module``.  Inactive modules get 0.
    """
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}")
    if flags.count == 0:
        return L.LossWeights()
    if flags.count == 1:
        lm = lc = lg = single_module
    else:
        lm = lc = MULTI_MODULE_LAMBDA
        lg = GRL_WEIGHT[profile]
    return L.LossWeights(lm if flags.mmd else 0.0, lc if flags.coral else 0.0, lg if flags.dann else 0.0)


def grl_schedule(epoch: int, max_epochs: int, lambda_max: float) -> float:
    """lambda_max * (2 / (1 + exp(-10 e / E)) - 1): 0 at e=0, rising toward lambda_max."""
    if max_epochs <= 0:
        raise ValueError("max_epochs must be positive")
    if not 0 <= epoch <= max_epochs:
        raise ValueError("epoch must lie in [0, max_epochs]")
    return lambda_max * (2.0 / (1.0 + math.exp(-10.0 * epoch / max_epochs)) - 1.0)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 64
    hidden: int = 256  # hidden width = embedding width p
    max_epochs: int = 200
    patience: int = 20
    clip: float = 1.0
    dropout: float = 0.1
    norm: str | None = None  # None -> profile default
    flags: L.Flags = field(default_factory=L.Flags)
    weights: L.LossWeights | None = None  # None -> lambda_preset(flags, profile)
    grl_lambda_max: float = 1.0
    profile: str = "female"
    seed: int = 0
    val_fraction: float = 0.1
    omega: float | None = None  # None -> n_neg / n_pos of the training split
    q: float = 2.0

    def __post_init__(self):
        if isinstance(self.flags, (str, list, tuple)):
            self.flags = L.Flags.parse(self.flags)
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        if self.profile == "male":
            self.batch_size = MALE_BATCH_SIZE
        if self.norm is None:
            self.norm = PROFILE_NORM.get(self.profile, "layer")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.clip > 0:
            raise ValueError("clip threshold must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def loss_weights(self, omega: float) -> L.LossWeights:
        base = self.weights if self.weights is not None else lambda_preset(self.flags, self.profile)
        return replace(base, omega=float(omega), q=self.q)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = self.flags.as_list()
        d["weights"] = None if self.weights is None else asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("weights") is not None and not isinstance(d["weights"], L.LossWeights):
            d["weights"] = L.LossWeights(**d["weights"])
        if "flags" in d and not isinstance(d["flags"], L.Flags):
            d["flags"] = L.Flags.parse(d["flags"])
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, **kw)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, wd: float) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update with decoupled weight decay, applied in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
    """
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps) + lr * wd * theta
        theta -= update
    return params, state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients by threshold/norm when the global L2 norm exceeds threshold.

    Returns (gradients, pre-clip norm).
    """
    if not threshold > 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    task: float
    mmd2: float
    coral: float
    dom: float
    total: float
    lambda_mmd: float
    lambda_coral: float
    lambda_grl: float
    grl_coeff: float
    val_loss: float
    grad_norm: float
    grad_norm_clipped_max: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainedModel:
    params: ModelParams
    history: list[EpochRecord]
    config: TrainConfig
    best_epoch: int
    best_val_loss: float
    weights: L.LossWeights
    seed: int

    @property
    def last_epoch(self) -> int:
        return self.history[-1].epoch

    def run_log(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.history)


def _check_source(source: CohortTable) -> None:
    if source.y is None:
        raise ValueError("source cohort needs outcomes")
    if np.isnan(source.X).any() or np.isnan(source.y).any():
        raise ValueError("source cohort has missing values; run complete_case_filter first")
    if source.n_pos == 0 or source.n_pos == source.n:
        raise ValueError("source cohort must contain both outcome classes")


def train(source: CohortTable, target: CohortTable, config: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainedModel:
    """Train extractor + classifier (+ discriminator) on ``source`` while aligning to ``target``.

    ``target`` must not carry outcomes.  A stratified ``val_fraction`` of the
    source is held out for early stopping on the weighted task loss; the
    parameters from the best epoch are returned.
    """
    require_no_outcome(target)
    _check_source(source)
    if np.isnan(target.X).any():
        raise ValueError("target cohort has missing values; run complete_case_filter first")
    cfg = config
    root = SeededRng(cfg.seed)
    keep, held = stratified_fraction_split(source.y, cfg.val_fraction, root.child("val-split"))
    tr, va = source.take(keep), source.take(held)
    if tr.n_pos == 0 or tr.n_pos == tr.n:
        raise ValueError("training split lost a class; the source has too few cases")

    n_pos = tr.n_pos
    omega = cfg.omega if cfg.omega is not None else (tr.n - n_pos) / n_pos
    weights = cfg.loss_weights(omega)
    flags = cfg.flags

    model = init_params(cfg.seed, d=source.X.shape[1], h=cfg.hidden, p=cfg.hidden,
                        norm=cfg.norm, dropout=cfg.dropout)
    params = model.arrays()
    opt = OptimizerState.zeros_like(params)
    sampler = WeightedBatchSampler(tr.y, cfg.batch_size, root.child("batches"))
    tgt_rng = root.child("target-batches")
    drop_rng = root.child("dropout")
    Xs, ys = tr.X, tr.y
    Xt = target.X

    history: list[EpochRecord] = []
    best = None
    best_val = math.inf
    best_epoch = -1
    stale = 0
    for epoch in range(cfg.max_epochs):
        gamma = grl_schedule(epoch, cfg.max_epochs, cfg.grl_lambda_max)
        sums = np.zeros(5)
        pre_norms = []
        post_max = 0.0
        nb = 0
        for b, idx in enumerate(sampler):
            t_batch = Xt[tgt_rng.integers(0, target.n, size=len(idx))] if flags.any else None
            res = backward(model, Xs[idx], ys[idx], t_batch, weights, flags, gamma,
                           drop_rng.child(f"{epoch}.{b}"))
            grads, pre = clip_gradients(res.grads, cfg.clip)
            post = pre if pre <= cfg.clip else global_norm(grads)
            adamw_step(params, grads, opt, cfg.lr, cfg.weight_decay)
            if res.bn is not None:
                model.bn = res.bn
            r = res.report
            sums += (r.task, r.mmd2, r.coral, r.dom, r.total)
            pre_norms.append(pre)
            post_max = max(post_max, post)
            nb += 1
        val_loss = L.weighted_bce(predict_proba(model, va.X), va.y, omega)
        means = sums / nb
        rec = EpochRecord(
            epoch=epoch, task=means[0], mmd2=means[1], coral=means[2], dom=means[3], total=means[4],
            lambda_mmd=weights.lambda_mmd if flags.mmd else 0.0,
            lambda_coral=weights.lambda_coral if flags.coral else 0.0,
            lambda_grl=weights.lambda_grl if flags.dann else 0.0,
            grl_coeff=gamma if flags.dann else 0.0,
            val_loss=val_loss, grad_norm=float(np.mean(pre_norms)), grad_norm_clipped_max=post_max,
        )
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_val:
            best_val, best_epoch, best, stale = val_loss, epoch, model.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    log.debug("trained %s: best epoch %d of %d, val %.5f", flags, best_epoch, len(history), best_val)
    return TrainedModel(best, history, cfg, best_epoch, best_val, weights, cfg.seed)


def train_many(jobs: Iterable[tuple[CohortTable, CohortTable, TrainConfig]], n_jobs: int = 1) -> list[TrainedModel]:
    """Run independent trainings, optionally in a process pool; output order follows input order."""
    jobs = list(jobs)
    if n_jobs <= 1 or len(jobs) <= 1:
        return [train(*j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_train_star, jobs))


def _train_star(job):
    return train(*job)
