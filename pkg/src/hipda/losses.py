"""Loss functionals and their gradients.

Every loss here has a value function and a companion ``*_grad`` returning the
gradient with respect to its array inputs.  Network code chains these through
the model by hand; no autodiff framework is involved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy.spatial.distance import cdist

from .stats import covariance_matrix, median_with_support

PROB_CLIP = 1e-7
KERNEL_MULTIPLIERS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class Flags:
    """Which alignment modules are active."""

    mmd: bool = False
    coral: bool = False
    dann: bool = False

    @classmethod
    def parse(cls, text: str | Iterable[str] | None) -> "Flags":
        if text is None:
            return cls()
        if isinstance(text, str):
            items = [t.strip().lower() for t in text.replace("+", ",").split(",")]
        else:
            items = [str(t).strip().lower() for t in text]
        items = [t for t in items if t and t not in ("none", "baseline")]
        aliases = {"mmd": "mmd", "m": "mmd", "coral": "coral", "c": "coral",
                   "dann": "dann", "grl": "dann", "d": "dann", "dan": "dann"}
        kw = {}
        for item in items:
            if item not in aliases:
                raise ValueError(f"unknown alignment flag {item!r}")
            kw[aliases[item]] = True
        return cls(**kw)

    @property
    def count(self) -> int:
        return int(self.mmd) + int(self.coral) + int(self.dann)

    @property
    def any(self) -> bool:
        return self.count > 0

    @property
    def label(self) -> str:
        """Short label: '' for baseline, else some of 'M', 'C', 'D' in that order."""
        return ("M" if self.mmd else "") + ("C" if self.coral else "") + ("D" if self.dann else "")

    def as_list(self) -> list[str]:
        return [n for n, on in (("mmd", self.mmd), ("coral", self.coral), ("dann", self.dann)) if on]

    def __str__(self) -> str:
        return ",".join(self.as_list()) or "none"


ALL_COMBINATIONS = (
    Flags(),
    Flags(mmd=True),
    Flags(coral=True),
    Flags(dann=True),
    Flags(mmd=True, coral=True),
    Flags(mmd=True, dann=True),
    Flags(coral=True, dann=True),
    Flags(mmd=True, coral=True, dann=True),
)


@dataclass(frozen=True)
class LossWeights:
    lambda_mmd: float = 0.0
    lambda_coral: float = 0.0
    lambda_grl: float = 0.0
    omega: float = 1.0
    q: float = 2.0

    def __post_init__(self):
        for name in ("lambda_mmd", "lambda_coral", "lambda_grl"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not self.q >= 1:
            raise ValueError(f"q must be >= 1, got {self.q}")

    def with_omega(self, omega: float) -> "LossWeights":
        return replace(self, omega=float(omega))


@dataclass(frozen=True)
class KernelScaleSet:
    base: float
    multipliers: tuple[float, ...] = KERNEL_MULTIPLIERS

    def __post_init__(self):
        if not self.base > 0:
            raise ValueError("kernel base must be positive")

    @property
    def sigma2(self) -> tuple[float, ...]:
        return tuple(m * self.base for m in self.multipliers)


@dataclass
class LossReport:
    task: float
    mmd2: float = 0.0
    coral: float = 0.0
    dom: float = 0.0
    total: float = field(default=0.0)

    def as_dict(self) -> dict[str, float]:
        return {"task": self.task, "mmd2": self.mmd2, "coral": self.coral,
                "dom": self.dom, "total": self.total}


# ---------------------------------------------------------------------------
# binary cross-entropies


def clip_probs(p: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), PROB_CLIP, 1.0 - PROB_CLIP)


def _check_pair(p, y):
    p = np.asarray(p, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValueError("empty batch")
    return p, y


def weighted_bce(y_hat, y, omega: float = 1.0) -> float:
    """Mean of -omega*y*log(p) - (1-y)*log(1-p) with p clipped to [1e-7, 1-1e-7]."""
    p, y = _check_pair(y_hat, y)
    p = clip_probs(p)
    per = -omega * y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
    return float(per.mean())


def weighted_bce_grad(y_hat, y, omega: float = 1.0) -> np.ndarray:
    """d weighted_bce / d y_hat (zero where the clip is active)."""
    p, y = _check_pair(y_hat, y)
    inside = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)
    pc = clip_probs(p)
    g = (-omega * y / pc + (1.0 - y) / (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


def domain_bce(d_hat, d) -> float:
    """Mean binary cross-entropy of domain predictions (d=0 source, d=1 target)."""
    return weighted_bce(d_hat, d, 1.0)


def domain_bce_grad(d_hat, d) -> np.ndarray:
    return weighted_bce_grad(d_hat, d, 1.0)


# ---------------------------------------------------------------------------
# MMD


def rbf_kernel(h1, h2, sigma2: float) -> float:
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    diff = np.asarray(h2, dtype=float) - np.asarray(h1, dtype=float)
    return float(np.exp(-np.dot(diff.ravel(), diff.ravel()) / (2.0 * sigma2)))


def _as_2d(H) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    if H.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    return H


def _pairwise_sq(H_s, H_t):
    X = np.vstack([_as_2d(H_s), _as_2d(H_t)])
    return X, cdist(X, X, "sqeuclidean")


def _base_from_distances(D: np.ndarray):
    """Median of upper-triangle distances -> (base, pair indices or None)."""
    n = D.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    if iu.size == 0:
        return 1.0, None
    vals = D[iu, ju]
    med, support = median_with_support(vals)
    if not math.isfinite(med) or med <= 0.0:
        return 1.0, None
    return med, (iu[support], ju[support])


def median_heuristic_base(H_s, H_t) -> float:
    """Median pairwise squared distance over the concatenated rows; 1.0 if degenerate."""
    H_s, H_t = _as_2d(H_s), _as_2d(H_t)
    if H_s.shape[0] == 0 or H_t.shape[0] == 0:
        raise ValueError("both embedding sets must be nonempty")
    _, D = _pairwise_sq(H_s, H_t)
    return _base_from_distances(D)[0]


def _mmd_coefficients(ns: int, nt: int) -> np.ndarray:
    n = ns + nt
    c = np.empty((n, n))
    c[:ns, :ns] = 1.0 / (ns * ns)
    c[ns:, ns:] = 1.0 / (nt * nt)
    c[:ns, ns:] = -1.0 / (ns * nt)
    c[ns:, :ns] = -1.0 / (ns * nt)
    return c


def _check_mmd_inputs(H_s, H_t):
    H_s, H_t = _as_2d(H_s), _as_2d(H_t)
    if H_s.shape[0] == 0 or H_t.shape[0] == 0:
        raise ValueError("MMD needs nonempty source and target sets")
    if H_s.shape[1] != H_t.shape[1]:
        raise ValueError("source and target embeddings differ in width")
    return H_s, H_t


def mmd2_multiscale(H_s, H_t) -> float:
    """Biased (V-statistic) MMD^2 averaged over sigma^2 in {0.5, 1, 2} x median base."""
    H_s, H_t = _check_mmd_inputs(H_s, H_t)
    ns, nt = H_s.shape[0], H_t.shape[0]
    _, D = _pairwise_sq(H_s, H_t)
    base, _ = _base_from_distances(D)
    total = 0.0
    for s2 in KernelScaleSet(base).sigma2:
        K = np.exp(-D / (2.0 * s2))
        total += K[:ns, :ns].sum() / (ns * ns) + K[ns:, ns:].sum() / (nt * nt) \
            - 2.0 * K[:ns, ns:].sum() / (ns * nt)
    return float(total / len(KERNEL_MULTIPLIERS))


def mmd2_multiscale_grad(H_s, H_t):
    """Value and gradients (d/dH_s, d/dH_t) of :func:`mmd2_multiscale`.

    The bandwidth base is the median of pair distances, itself a function of
    the embeddings; its derivative (through the median pair or pairs) is
    included, so the result is the exact gradient almost everywhere.
    """
    H_s, H_t = _check_mmd_inputs(H_s, H_t)
    ns, nt = H_s.shape[0], H_t.shape[0]
    X, D = _pairwise_sq(H_s, H_t)
    base, pairs = _base_from_distances(D)
    c = _mmd_coefficients(ns, nt)
    n_scales = len(KERNEL_MULTIPLIERS)

    value = 0.0
    G = np.zeros_like(D)  # dL/dD_ij with base held fixed
    dbase = 0.0
    for m in KERNEL_MULTIPLIERS:
        s2 = m * base
        CK = c * np.exp(-D / (2.0 * s2))
        value += CK.sum()
        G -= CK / (2.0 * s2)
        dbase += (CK * D).sum() / (2.0 * s2 * base)
    value /= n_scales
    G /= n_scales
    dbase /= n_scales
    if pairs is not None:
        w = 1.0 / len(pairs[0])
        np.add.at(G, pairs, dbase * w)

    S = G + G.T
    dX = 2.0 * (S.sum(axis=1)[:, None] * X - S @ X)
    return float(value), dX[:ns], dX[ns:]


# ---------------------------------------------------------------------------
# CORAL


def _check_coral_inputs(H_s, H_t):
    H_s, H_t = _as_2d(H_s), _as_2d(H_t)
    if H_s.shape[0] < 2 or H_t.shape[0] < 2:
        raise ValueError("CORAL needs at least 2 rows in each set")
    if H_s.shape[1] != H_t.shape[1]:
        raise ValueError("source and target embeddings differ in width")
    return H_s, H_t


def coral(H_s, H_t, q: float = 2.0, p: int | None = None) -> float:
    """(1/4p^2) * ||cov(H_s) - cov(H_t)||_q^2 with 1/(n-1) covariances."""
    H_s, H_t = _check_coral_inputs(H_s, H_t)
    p = H_s.shape[1] if p is None else p
    diff = covariance_matrix(H_s) - covariance_matrix(H_t)
    if q == 2:
        norm2 = float(np.sum(diff * diff))
    else:
        norm2 = float(np.sum(np.abs(diff) ** q) ** (2.0 / q))
    return norm2 / (4.0 * p * p)


def coral_grad(H_s, H_t, q: float = 2.0, p: int | None = None):
    """Value and gradients (d/dH_s, d/dH_t) of :func:`coral`."""
    H_s, H_t = _check_coral_inputs(H_s, H_t)
    p = H_s.shape[1] if p is None else p
    diff = covariance_matrix(H_s) - covariance_matrix(H_t)
    scale = 1.0 / (4.0 * p * p)
    if q == 2:
        value = float(np.sum(diff * diff)) * scale
        M = 2.0 * diff * scale
    else:
        a = np.abs(diff)
        S = float(np.sum(a ** q))
        value = S ** (2.0 / q) * scale
        M = (2.0 * S ** (2.0 / q - 1.0) * a ** (q - 1.0) * np.sign(diff) * scale) if S > 0 else np.zeros_like(diff)

    def through_cov(H, M):
        C = H - H.mean(axis=0, keepdims=True)
        dC = C @ (M + M.T) / (H.shape[0] - 1)
        return dC - dC.mean(axis=0, keepdims=True)

    return value, through_cov(H_s, M), through_cov(H_t, -M)


# ---------------------------------------------------------------------------
# composite


def composite(task: float, mmd2: float, coral_value: float, dom: float,
              weights: LossWeights, flags: Flags) -> float:
    """task + sum of lambda-weighted alignment terms for the active flags."""
    total = task
    if flags.mmd:
        total = total + weights.lambda_mmd * mmd2
    if flags.coral:
        total = total + weights.lambda_coral * coral_value
    if flags.dann:
        total = total + weights.lambda_grl * dom
    return total
