"""Small numerical routines shared across the package.

All randomness in the package flows through :class:`SeededRng`, a thin wrapper
around numpy's Philox-4x64 counter-based bit generator.  Philox output depends
only on its 256-bit key and 256-bit counter, so a given ``(seed, stream)`` pair
reproduces the same sequence on every platform numpy supports.
"""
from __future__ import annotations

import hashlib
import math
from typing import Iterable, Sequence

import numpy as np

RNG_ALGORITHM = "philox4x64-10"


def _philox_key(seed: int, path: Sequence[str]) -> int:
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for part in path:
        h.update(b"\x00")
        h.update(part.encode("utf-8"))
    # Philox4x64 takes a 128-bit key.
    return int.from_bytes(h.digest()[:16], "little")


class SeededRng:
    """Named, splittable random stream.

    ``SeededRng(7).child("batches").child("epoch-3")`` always yields the same
    sequence.  Children are derived by hashing the stream path, so adding a new
    stream never perturbs existing ones.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, stream: Sequence[str] = ()):
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise TypeError(f"seed must be an integer, got {seed!r}")
        self.seed = int(seed)
        self.stream = tuple(stream)
        key = _philox_key(self.seed, self.stream)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str | int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + (str(name),))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={'/'.join(self.stream) or '-'})"

    # thin pass-throughs used across the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, x):
        return self.generator.permutation(x)


# ---------------------------------------------------------------------------
# incomplete beta / Student t


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x < 0.0 or x > 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the continued fraction converges fast for x < (a+1)/(a+b+2)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    """CDF of Student's t distribution with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    if t == 0.0:
        return 0.5
    # P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2); computing x this way keeps
    # precision when t^2 >> df.
    x = df / (df + t * t)
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided p-value P(|T| >= |t|)."""
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return betainc_regularized(df / 2.0, 0.5, x)


# ---------------------------------------------------------------------------
# order statistics, covariance, summation


def median(values: Iterable[float]) -> float:
    """Median; the mean of the two middle order statistics for even counts."""
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("median of an empty sequence")
    return float(median_with_support(arr)[0])


def median_with_support(arr: np.ndarray) -> tuple[float, np.ndarray]:
    """Median of a 1-D array plus the flat index/indices it was taken from.

    For an even count the median is the average of the two middle order
    statistics and both indices are returned.  Used where the median is
    differentiated with respect to its inputs.
    """
    arr = np.asarray(arr, dtype=float).ravel()
    n = arr.size
    if n == 0:
        raise ValueError("median of an empty sequence")
    k = n // 2
    if n % 2:
        idx = np.argpartition(arr, k)[k]
        return float(arr[idx]), np.array([idx])
    part = np.argpartition(arr, (k - 1, k))
    lo, hi = part[k - 1], part[k]
    return float(0.5 * (arr[lo] + arr[hi])), np.array([lo, hi])


def covariance_matrix(H: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance of the rows of ``H`` (n x p), 1/(n-1) scaling."""
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise ValueError("expected a 2-D array")
    n = H.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 rows, got {n}")
    centered = H - H.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    # mirror the upper triangle so the result is exactly symmetric
    upper = np.triu(cov)
    return upper + np.triu(cov, 1).T


def stable_sum(values: Iterable[float]) -> float:
    """Correctly rounded floating point sum."""
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample SD (ddof=1; SD is 0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    n = arr.size
    if n == 0:
        raise ValueError("empty sequence")
    mu = stable_sum(arr) / n
    if n == 1:
        return mu, 0.0
    sd = math.sqrt(stable_sum((arr - mu) ** 2) / (n - 1))
    return mu, sd


def sigmoid(z):
    """Numerically stable logistic function (elementwise)."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
