"""Synthetic source/target cohorts built from published per-cohort marginals.

Built-in specs reproduce the summary table of the four cohorts (older female
and male source cohorts, younger female and male target subsets): continuous
features as Normal(mean, SD), walking pace and smoking as 3-level categoricals,
prior fractures as Bernoulli prevalences, and the 0-5 IADL score as a
zero-inflated truncated geometric fitted to the reported mean and SD.

Outcomes are Bernoulli(sigmoid(b0 + beta . z)) where z is the feature vector
standardized with the generating spec's own means and SDs, so the same
coefficient vector carries over across cohorts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.optimize import brentq, least_squares

from .cohort import CohortTable, FeatureSchema, default_schema
from .stats import SeededRng, sigmoid


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    kind: str  # continuous | ordinal | binary
    mean: float = 0.0
    sd: float = 1.0
    probs: tuple[float, ...] = ()
    prevalence: float = 0.0

    @classmethod
    def continuous(cls, mean: float, sd: float) -> "FeatureSpec":
        return cls("continuous", mean=float(mean), sd=float(sd))

    @classmethod
    def ordinal(cls, probs) -> "FeatureSpec":
        return cls("ordinal", probs=tuple(float(p) for p in probs))

    @classmethod
    def binary(cls, prevalence: float) -> "FeatureSpec":
        return cls("binary", prevalence=float(prevalence))

    def validate(self, name: str = "") -> None:
        if self.kind == "continuous":
            if not (self.sd > 0 and math.isfinite(self.sd) and math.isfinite(self.mean)):
                raise SpecError(f"{name}: SD must be positive and finite (got {self.sd})")
        elif self.kind == "ordinal":
            p = np.asarray(self.probs)
            if p.size < 2 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise SpecError(f"{name}: category probabilities must be nonnegative and sum to 1")
        elif self.kind == "binary":
            if not 0.0 <= self.prevalence <= 1.0:
                raise SpecError(f"{name}: prevalence must lie in [0, 1]")
        else:
            raise SpecError(f"{name}: unknown kind {self.kind!r}")

    def moments(self) -> tuple[float, float]:
        """Implied (mean, SD) of the generated feature."""
        if self.kind == "continuous":
            return self.mean, self.sd
        if self.kind == "binary":
            p = self.prevalence
            return p, math.sqrt(p * (1 - p))
        k = np.arange(len(self.probs))
        p = np.asarray(self.probs)
        m = float((p * k).sum())
        return m, float(math.sqrt((p * (k - m) ** 2).sum()))

    def to_dict(self) -> dict:
        if self.kind == "continuous":
            return {"kind": "continuous", "mean": self.mean, "sd": self.sd}
        if self.kind == "ordinal":
            return {"kind": "ordinal", "probs": list(self.probs)}
        return {"kind": "binary", "prevalence": self.prevalence}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        kind = d.get("kind")
        if kind == "continuous":
            return cls.continuous(d["mean"], d["sd"])
        if kind == "ordinal":
            return cls.ordinal(d["probs"])
        if kind == "binary":
            return cls.binary(d["prevalence"])
        raise SpecError(f"unknown feature kind {kind!r}")


@dataclass(frozen=True)
class FeatureSpecSet:
    """Per-feature generators in schema order, plus optional correlation pairs.

    ``correlations`` holds ``(a, b, angle)`` triples: the standardized draw of
    continuous feature ``b`` is rotated toward that of ``a`` by ``angle``
    radians, giving corr(a, b) = sin(angle) while leaving both marginals
    unchanged.
    """

    name: str
    features: Mapping[str, FeatureSpec]
    correlations: tuple[tuple[str, str, float], ...] = ()

    def validate(self, schema: FeatureSchema | None = None) -> None:
        schema = schema or default_schema()
        if list(self.features) != schema.names:
            raise SpecError(f"spec {self.name!r}: features must match schema order {schema.names}")
        for n, f in self.features.items():
            f.validate(n)
        for a, b, angle in self.correlations:
            for n in (a, b):
                if n not in self.features or self.features[n].kind != "continuous":
                    raise SpecError(f"correlation pair needs continuous features, got {n!r}")
            if a == b:
                raise SpecError("correlation pair must name two different features")
            if not abs(angle) < math.pi / 2:
                raise SpecError("correlation angle must lie in (-pi/2, pi/2)")

    def to_dict(self) -> dict:
        return {"name": self.name,
                "features": {k: v.to_dict() for k, v in self.features.items()},
                "correlations": [list(c) for c in self.correlations]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpecSet":
        feats = {k: FeatureSpec.from_dict(v) for k, v in d["features"].items()}
        corr = tuple((a, b, float(t)) for a, b, t in d.get("correlations", ()))
        return cls(d.get("name", "custom"), feats, corr)


@dataclass(frozen=True)
class OutcomeModel:
    coef: tuple[float, ...]
    intercept: float
    noise: bool = True

    def validate(self, d: int = 12) -> None:
        c = np.asarray(self.coef, dtype=float)
        if c.shape != (d,) or not np.all(np.isfinite(c)) or not math.isfinite(self.intercept):
            raise SpecError(f"outcome model needs {d} finite coefficients and a finite intercept")

    def to_dict(self) -> dict:
        return {"coef": list(self.coef), "intercept": self.intercept, "noise": self.noise}

    @classmethod
    def from_dict(cls, d: Mapping) -> "OutcomeModel":
        return cls(tuple(float(c) for c in d["coef"]), float(d["intercept"]), bool(d.get("noise", True)))


@dataclass(frozen=True)
class ShiftSpec:
    mean_offsets: Mapping[str, float] = field(default_factory=dict)
    sd_scales: Mapping[str, float] = field(default_factory=dict)
    prob_overrides: Mapping[str, object] = field(default_factory=dict)  # probs tuple or prevalence
    correlations: tuple[tuple[str, str, float], ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShiftSpec":
        return cls(dict(d.get("mean_offsets", {})), dict(d.get("sd_scales", {})),
                   dict(d.get("prob_overrides", {})),
                   tuple((a, b, float(t)) for a, b, t in d.get("correlations", ())))


# ---------------------------------------------------------------------------
# built-in cohorts


def _fit_iadl(mean: float, sd: float) -> tuple[float, ...]:
    """Zero-inflated truncated geometric on 0..5 matching the given mean and SD.

    P(0) = p0 and P(k) proportional to r^(k-1) for k = 1..5.
    """
    k = np.arange(6)

    def probs(theta):
        p0, r = 1 / (1 + np.exp(-theta[0])), 1 / (1 + np.exp(-theta[1]))
        g = r ** np.arange(5)
        return np.concatenate([[p0], (1 - p0) * g / g.sum()])

    def resid(theta):
        p = probs(theta)
        m = (p * k).sum()
        return [m - mean, math.sqrt((p * (k - m) ** 2).sum()) - sd]

    fit = least_squares(resid, [1.0, 0.0], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if max(abs(r) for r in resid(fit.x)) > 1e-8:
        raise SpecError(f"cannot fit IADL distribution to mean={mean}, sd={sd}")
    p = probs(fit.x)
    p = p / p.sum()
    return tuple(float(v) for v in p)


def _pct(*values: float) -> tuple[float, ...]:
    total = sum(values)
    return tuple(v / total for v in values)


# (age, height, weight, grip, walk%, smoke%, shoulder%, wrist%, iadl, TH, LS, FN)
_COHORT_SUMMARIES = {
    "sof-like": ((71.5, 5.3), (159.1, 5.9), (67.8, 12.3), (20.9, 4.2),
                 (25.3, 50.8, 23.8), (63.9, 27.9, 7.9), 6.0, 10.8, (0.52, 0.96),
                 (0.00, 1.01), (0.00, 1.00), (0.00, 1.01)),
    "mros-like": ((74.1, 6.0), (173.9, 6.8), (82.6, 13.1), (38.7, 8.3),
                  (25.1, 49.9, 24.8), (39.0, 58.0, 3.0), 1.2, 1.6, (0.34, 0.81),
                  (0.00, 1.01), (0.00, 1.00), (0.00, 1.01)),
    "ukb-female-like": ((60.0, 4.1), (162.9, 6.3), (67.0, 12.8), (20.9, 5.5),
                        (7.6, 50.2, 42.2), (59.3, 39.3, 1.5), 12.2, 26.1, (0.40, 0.84),
                        (-0.48, 0.72), (-0.40, 0.76), (-0.26, 0.86)),
    "ukb-male-like": ((60.7, 4.0), (176.8, 7.0), (81.6, 12.3), (35.5, 9.2),
                      (9.0, 52.4, 38.6), (57.6, 39.0, 3.3), 10.5, 11.4, (0.32, 0.80),
                      (0.91, 0.80), (0.77, 0.95), (0.53, 1.02)),
}

COHORT_SIZES = {"sof-like": 3625, "mros-like": 4295, "ukb-female-like": 410, "ukb-male-like": 210}


@lru_cache(maxsize=None)
def _builtin(name: str) -> FeatureSpecSet:
    age, height, weight, grip, walk, smoke, shoulder, wrist, iadl, th, ls, fn = _COHORT_SUMMARIES[name]
    C = FeatureSpec.continuous
    feats = {
        "age": C(*age), "height": C(*height), "weight": C(*weight), "grip_strength": C(*grip),
        "walking_pace": FeatureSpec.ordinal(_pct(*walk)),
        "smoking": FeatureSpec.ordinal(_pct(*smoke)),
        "prior_fx_shoulder": FeatureSpec.binary(shoulder / 100.0),
        "prior_fx_wrist": FeatureSpec.binary(wrist / 100.0),
        "iadl": FeatureSpec.ordinal(_fit_iadl(*iadl)),
        "bmd_total_hip": C(*th), "bmd_lumbar_spine": C(*ls), "bmd_femoral_neck": C(*fn),
    }
    return FeatureSpecSet(name, feats)


def builtin_specs() -> dict[str, FeatureSpecSet]:
    """The four built-in cohort specs keyed by name."""
    return {name: _builtin(name) for name in _COHORT_SUMMARIES}


def get_spec(name: str) -> FeatureSpecSet:
    key = name.lower().replace("_", "-")
    if key not in _COHORT_SUMMARIES:
        raise SpecError(f"unknown built-in spec {name!r}; choose from {sorted(_COHORT_SUMMARIES)}")
    return _builtin(key)


# Outcome coefficients on standardized features, in schema order.
DEFAULT_COEF = (
    0.9,    # age
    0.0,    # height
    -0.2,   # weight
    -0.5,   # grip_strength
    -0.2,   # walking_pace (brisk is protective)
    0.15,   # smoking
    0.35,   # prior_fx_shoulder
    0.35,   # prior_fx_wrist
    0.25,   # iadl
    -0.9,   # bmd_total_hip
    -0.3,   # bmd_lumbar_spine
    -0.6,   # bmd_femoral_neck
)
DEFAULT_PREVALENCE = 0.04


def _intercept_for(prevalence: float, scale: float) -> float:
    """Intercept so E[sigmoid(b0 + scale*Z)] = prevalence, Z ~ N(0, 1) (Gauss-Hermite)."""
    x, w = np.polynomial.hermite_e.hermegauss(80)
    w = w / w.sum()
    f = lambda b0: float((w * sigmoid(b0 + scale * x)).sum()) - prevalence  # noqa: E731
    return float(brentq(f, -40.0, 40.0, xtol=1e-14))


def default_outcome_model(prevalence: float = DEFAULT_PREVALENCE, coef=DEFAULT_COEF) -> OutcomeModel:
    """Clinically signed coefficients with the intercept tuned to ``prevalence``.

    The linear predictor on independent standardized features has SD ||coef||,
    which is treated as Gaussian when solving for the intercept.
    """
    scale = float(np.linalg.norm(coef))
    return OutcomeModel(tuple(float(c) for c in coef), _intercept_for(prevalence, scale))


# ---------------------------------------------------------------------------
# generation and shifts


def _standard_normals(spec: FeatureSpecSet, rng: SeededRng, n: int) -> dict[str, np.ndarray]:
    z = {name: rng.child(name).normal(size=n)
         for name, f in spec.features.items() if f.kind == "continuous"}
    for a, b, angle in spec.correlations:
        z[b] = math.sin(angle) * z[a] + math.cos(angle) * z[b]
    return z


def generate(spec: FeatureSpecSet, outcome: OutcomeModel | None, n: int, seed: int,
             schema: FeatureSchema | None = None) -> CohortTable:
    """Draw ``n`` rows from ``spec`` (plus outcomes when ``outcome`` is given)."""
    schema = schema or default_schema()
    if n < 1:
        raise SpecError("n must be >= 1")
    spec.validate(schema)
    if outcome is not None:
        outcome.validate(schema.d)
    rng = SeededRng(seed, ("synth", spec.name))
    z = _standard_normals(spec, rng.child("continuous"), n)
    X = np.empty((n, schema.d))
    for j, (name, f) in enumerate(spec.features.items()):
        if f.kind == "continuous":
            X[:, j] = f.mean + f.sd * z[name]
        elif f.kind == "ordinal":
            cdf = np.cumsum(f.probs)
            cdf[-1] = 1.0
            u = rng.child(name).random(n)
            X[:, j] = np.searchsorted(cdf, u, side="right")
        else:
            X[:, j] = (rng.child(name).random(n) < f.prevalence).astype(float)
    y = None
    if outcome is not None:
        mom = np.array([f.moments() for f in spec.features.values()])
        sd = np.where(mom[:, 1] > 0, mom[:, 1], 1.0)
        Z = (X - mom[:, 0]) / sd
        eta = outcome.intercept + Z @ np.asarray(outcome.coef)
        if outcome.noise:
            y = (rng.child("outcome").random(n) < sigmoid(eta)).astype(float)
        else:
            y = (eta > 0).astype(float)
    return CohortTable(X, y, schema, spec.name)


def apply_shift(spec: FeatureSpecSet, shift: ShiftSpec, name: str | None = None) -> FeatureSpecSet:
    """New spec with means offset, SDs scaled, probabilities overridden and correlations added."""
    for key in list(shift.mean_offsets) + list(shift.sd_scales) + list(shift.prob_overrides):
        if key not in spec.features:
            raise SpecError(f"shift names unknown feature {key!r}")
    feats = {}
    for fname, f in spec.features.items():
        if f.kind == "continuous":
            scale = shift.sd_scales.get(fname, 1.0)
            if not scale > 0:
                raise SpecError(f"{fname}: SD scaling must be positive")
            f = replace(f, mean=f.mean + shift.mean_offsets.get(fname, 0.0), sd=f.sd * scale)
            if not f.sd > 0:
                raise SpecError(f"{fname}: shifted SD must be positive")
        elif fname in shift.prob_overrides:
            val = shift.prob_overrides[fname]
            f = FeatureSpec.binary(float(val)) if f.kind == "binary" else FeatureSpec.ordinal(val)
        feats[fname] = f
    out = FeatureSpecSet(name or spec.name, feats, spec.correlations + tuple(shift.correlations))
    out.validate()
    return out


def load_spec_file(path) -> FeatureSpecSet:
    return FeatureSpecSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def dump_spec(spec: FeatureSpecSet) -> str:
    return json.dumps(spec.to_dict(), indent=2)
