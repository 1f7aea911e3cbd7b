"""Cohort ingestion, harmonization, splitting and mini-batch sampling.

A :class:`CohortTable` is the harmonized, numerically coded form used
everywhere else.  Text categories from raw files live in a :class:`RawTable`
until :func:`recode_categoricals` maps them to codes.

Target cohorts handed to training must carry no outcome vector; use
:meth:`CohortTable.without_outcome`.  Training-side code calls
:func:`require_no_outcome` and raises :class:`LeakageError` otherwise.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .stats import SeededRng

log = logging.getLogger(__name__)

MISSING_TOKENS = ("", "NA")
AMBIGUOUS_CATEGORIES = ("Prefer not to answer", "Do not know", "None of the above")
DEFAULT_STRATA = ((65.0, 75.0), (76.0, 96.0))


class SchemaError(ValueError):
    """Input table does not match the feature schema."""


class ParseError(ValueError):
    """A cell could not be parsed; carries 1-based data row and column name."""

    def __init__(self, row: int, column: str, value: str):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")


class CategoryError(ValueError):
    """A categorical cell holds a value outside the documented vocabulary."""

    def __init__(self, column: str, value: str):
        self.column, self.value = column, value
        super().__init__(f"unknown category {value!r} in column {column!r}")


class LeakageError(RuntimeError):
    """A target table carrying outcomes reached an outcome-free code path."""


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # continuous | ordinal | binary
    units: str = ""
    low: float = -math.inf
    high: float = math.inf
    categories: Mapping[str, int] | None = None  # text -> code, ordinal only

    def __post_init__(self):
        if self.kind not in ("continuous", "ordinal", "binary"):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    outcome: str = "hip_fracture"

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def d(self) -> int:
        return len(self.features)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __getitem__(self, name: str) -> Feature:
        return self.features[self.index(name)]


SMOKING_CODES = {"Never": 0, "Former": 1, "Current": 2}
WALKING_PACE_CODES = {
    "Slow pace": 0, "Steady average pace": 1, "Brisk pace": 2,
    "Slow": 0, "Steady average": 1, "Brisk": 2,
}
# IADL is coded 0-4 in some cohort descriptions and 0-5 in others; accept 0-5.
IADL_CODES = {str(k): k for k in range(6)}

BMD_COLUMNS = ("bmd_total_hip", "bmd_lumbar_spine", "bmd_femoral_neck")


def default_schema() -> FeatureSchema:
    """The 12 harmonized predictors in canonical column order."""
    return FeatureSchema((
        Feature("age", "continuous", "years", 0, 120),
        Feature("height", "continuous", "cm", 50, 250),
        Feature("weight", "continuous", "kg", 10, 300),
        Feature("grip_strength", "continuous", "kg", 0, 150),
        Feature("walking_pace", "ordinal", "", 0, 2, WALKING_PACE_CODES),
        Feature("smoking", "ordinal", "", 0, 2, SMOKING_CODES),
        Feature("prior_fx_shoulder", "binary", "", 0, 1),
        Feature("prior_fx_wrist", "binary", "", 0, 1),
        Feature("iadl", "ordinal", "", 0, 5, IADL_CODES),
        Feature("bmd_total_hip", "continuous", "T-score", -10, 10),
        Feature("bmd_lumbar_spine", "continuous", "T-score", -10, 10),
        Feature("bmd_femoral_neck", "continuous", "T-score", -10, 10),
    ))


def format_schema(schema: FeatureSchema) -> str:
    """Plain-text schema block, one ``name | kind | units | low | high | categories`` line per feature."""
    lines = ["# name | kind | units | low | high | categories (text=code; ...)"]
    for f in schema.features:
        cats = "; ".join(f"{k}={v}" for k, v in (f.categories or {}).items())
        lines.append(f"{f.name} | {f.kind} | {f.units} | {f.low:g} | {f.high:g} | {cats}")
    lines.append(f"outcome | {schema.outcome}")
    return "\n".join(lines) + "\n"


def parse_schema(text: str) -> FeatureSchema:
    feats, outcome = [], "hip_fracture"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if parts[0] == "outcome":
            outcome = parts[1]
            continue
        if len(parts) < 5:
            raise SchemaError(f"schema line {lineno}: expected at least 5 '|'-separated fields")
        cats = None
        if len(parts) > 5 and parts[5]:
            cats = {}
            for item in parts[5].split(";"):
                k, _, v = item.strip().rpartition("=")
                cats[k.strip()] = int(v)
        feats.append(Feature(parts[0], parts[1], parts[2], float(parts[3]), float(parts[4]), cats))
    return FeatureSchema(tuple(feats), outcome)


def load_schema(path) -> FeatureSchema:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class CohortTable:
    """Harmonized feature matrix (n x d), optional 0/1 outcome, schema, label.

    Missing cells are NaN until :func:`complete_case_filter` runs.
    """

    X: np.ndarray
    y: np.ndarray | None
    schema: FeatureSchema = field(default_factory=default_schema, repr=False)
    label: str = ""

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.schema.d:
            raise SchemaError(f"feature matrix must have {self.schema.d} columns, got shape {X.shape}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.array(self.y, dtype=float).ravel()
            if y.shape[0] != X.shape[0]:
                raise SchemaError("outcome length differs from the number of rows")
            obs = y[~np.isnan(y)]
            if not np.all((obs == 0) | (obs == 1)):
                raise SchemaError("outcome entries must be 0 or 1")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def has_outcome(self) -> bool:
        return self.y is not None

    @property
    def n_pos(self) -> int:
        return int(np.nansum(self.y)) if self.y is not None else 0

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.schema.index(name)]

    def take(self, idx) -> "CohortTable":
        idx = np.asarray(idx, dtype=int)
        return CohortTable(self.X[idx], None if self.y is None else self.y[idx], self.schema, self.label)

    def without_outcome(self) -> "CohortTable":
        return CohortTable(self.X, None, self.schema, self.label)

    def to_csv(self, path, delimiter: str = ",", float_format: str = "{:.6f}") -> None:
        write_cohort(self, path, delimiter, float_format)


def require_no_outcome(table: CohortTable, what: str = "target table") -> None:
    if table.y is not None:
        raise LeakageError(f"{what} carries an outcome vector; target outcomes must not reach training or selection")


@dataclass(frozen=True)
class RawTable:
    """Parsed file where ordinal columns may still hold text categories (or None for missing)."""

    columns: Mapping[str, np.ndarray]  # object arrays, one per schema feature
    y: np.ndarray | None
    schema: FeatureSchema
    label: str = ""

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def _is_missing(cell: str) -> bool:
    return cell.strip() in MISSING_TOKENS


def _parse_float(cell: str, row: int, column: str) -> float:
    if _is_missing(cell):
        return math.nan
    try:
        return float(cell.strip())
    except ValueError:
        raise ParseError(row, column, cell) from None


def read_table(path, schema: FeatureSchema | None = None, delimiter: str = ",",
               with_outcome: bool = True, label: str | None = None) -> RawTable:
    """Read a delimited text file with a header row into a :class:`RawTable`.

    Continuous and binary columns are parsed as floats (dot decimal, ``NA`` or
    empty = missing).  Ordinal columns keep their text so that
    :func:`recode_categoricals` can map and filter them.  The outcome column is
    attached when present in the file and ``with_outcome`` is set.
    """
    schema = schema or default_schema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for name in schema.names:
            if name not in header:
                raise SchemaError(f"{path}: missing column {name!r}")
        pos = {name: header.index(name) for name in schema.names}
        out_pos = header.index(schema.outcome) if (with_outcome and schema.outcome in header) else None
        cols: dict[str, list] = {name: [] for name in schema.names}
        ys: list[float] = []
        for rowno, row in enumerate(reader, 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            for f in schema.features:
                cell = row[pos[f.name]]
                if f.kind == "ordinal":
                    cols[f.name].append(None if _is_missing(cell) else cell.strip())
                else:
                    cols[f.name].append(_parse_float(cell, rowno, f.name))
            if out_pos is not None:
                ys.append(_parse_float(row[out_pos], rowno, schema.outcome))
    columns = {k: np.array(v, dtype=object) for k, v in cols.items()}
    y = np.array(ys, dtype=float) if out_pos is not None else None
    return RawTable(columns, y, schema, label if label is not None else path.stem)


def _code_for(feature: Feature, value) -> float | None:
    """Numeric code for a cell, or None if the cell is an ambiguous response."""
    if value is None:
        return math.nan
    if isinstance(value, (int, float, np.integer, np.floating)):
        v = float(value)
        if math.isnan(v):
            return v
    else:
        text = str(value).strip()
        if text in AMBIGUOUS_CATEGORIES:
            return None
        if feature.categories and text in feature.categories:
            return float(feature.categories[text])
        try:
            v = float(text)
        except ValueError:
            raise CategoryError(feature.name, text) from None
    valid = set((feature.categories or {}).values())
    if not valid:
        valid = set(range(int(feature.low), int(feature.high) + 1))
    if v not in valid:
        raise CategoryError(feature.name, str(value))
    return v


def recode_categoricals(raw: RawTable | CohortTable) -> tuple[CohortTable, int]:
    """Map text categories to integer codes and drop ambiguous responses.

    Smoking: Never=0, Former=1, Current=2.  Walking pace: Slow=0,
    Steady average=1, Brisk=2.  IADL / walking difficulty: integers 0-5.
    Rows holding "Prefer not to answer", "Do not know" or "None of the above"
    in any categorical column are removed.  Returns the coded table and the
    number of dropped rows.  Already-coded input passes through unchanged.
    """
    if isinstance(raw, CohortTable):
        schema = raw.schema
        cols = {f.name: raw.X[:, i] for i, f in enumerate(schema.features)}
        raw = RawTable(cols, raw.y, schema, raw.label)
    schema = raw.schema
    n = raw.n
    X = np.empty((n, schema.d))
    keep = np.ones(n, dtype=bool)
    for j, f in enumerate(schema.features):
        col = raw.columns[f.name]
        if f.kind != "ordinal":
            X[:, j] = np.asarray(col, dtype=float)
            continue
        for i, cell in enumerate(col):
            code = _code_for(f, cell)
            if code is None:
                keep[i] = False
                X[i, j] = math.nan
            else:
                X[i, j] = code
    dropped = int((~keep).sum())
    if dropped:
        log.info("%s: dropped %d rows with ambiguous categorical responses", raw.label, dropped)
    y = None if raw.y is None else np.asarray(raw.y, dtype=float)[keep]
    return CohortTable(X[keep], y, schema, raw.label), dropped


def load_cohort(path, schema: FeatureSchema | None = None, delimiter: str = ",",
                with_outcome: bool = True, label: str | None = None) -> CohortTable:
    """Read, recode and return a cohort file (missing values stay as NaN)."""
    table, _ = recode_categoricals(read_table(path, schema, delimiter, with_outcome, label))
    return table


def write_cohort(table: CohortTable, path, delimiter: str = ",", float_format: str = "{:.6f}") -> None:
    names = table.schema.names
    kinds = [f.kind for f in table.schema.features]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(names + ([table.schema.outcome] if table.y is not None else []))
        for i in range(table.n):
            row = []
            for v, kind in zip(table.X[i], kinds):
                if math.isnan(v):
                    row.append("NA")
                elif kind == "continuous":
                    row.append(float_format.format(v))
                else:
                    row.append(str(int(v)))
            if table.y is not None:
                row.append("NA" if math.isnan(table.y[i]) else str(int(table.y[i])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# harmonization


def complete_case_filter(cohort: CohortTable) -> tuple[CohortTable, int]:
    """Drop rows with any missing predictor (or missing outcome when present)."""
    bad = np.isnan(cohort.X).any(axis=1)
    if cohort.y is not None:
        bad |= np.isnan(cohort.y)
    keep = np.flatnonzero(~bad)
    return cohort.take(keep), int(bad.sum())


def _assign_strata(age: np.ndarray, strata: Sequence[tuple[float, float]]) -> np.ndarray:
    """Index of the stratum containing each age; out-of-range ages go to the nearest one."""
    dist = np.stack([np.maximum(lo - age, 0.0) + np.maximum(age - hi, 0.0) for lo, hi in strata], axis=1)
    return np.argmin(dist, axis=1)  # ties resolve to the lower stratum


def standardize_bmd(cohort: CohortTable, strata: Sequence[tuple[float, float]] = DEFAULT_STRATA,
                    columns: Sequence[str] = BMD_COLUMNS) -> CohortTable:
    """Convert BMD columns to T-score-like values within age strata.

    Each value becomes (value - mean_ref) / sd_ref, where the reference is the
    fracture-free rows assigned to the same stratum (sample SD, ddof=1).
    """
    if cohort.y is None:
        raise ValueError("BMD standardization needs the outcome to define the fracture-free reference")
    age = cohort.column("age")
    stratum = _assign_strata(age, strata)
    ref = cohort.y == 0
    X = cohort.X.copy()
    for name in columns:
        j = cohort.schema.index(name)
        for s, (lo, hi) in enumerate(strata):
            in_s = stratum == s
            r = X[in_s & ref, j]
            if in_s.any() and r.size < 2:
                raise ValueError(f"stratum {lo:g}-{hi:g}: fewer than 2 fracture-free rows for {name}")
            if not in_s.any():
                continue
            mu = r.mean()
            sd = r.std(ddof=1)
            if sd == 0:
                raise ValueError(f"stratum {lo:g}-{hi:g}: zero reference SD for {name}")
            X[in_s, j] = (X[in_s, j] - mu) / sd
    return CohortTable(X, cohort.y, cohort.schema, cohort.label)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitResult:
    pseudo: CohortTable
    evaluation: CohortTable
    pseudo_idx: np.ndarray
    eval_idx: np.ndarray
    permutation: np.ndarray


def stratified_half_split(cohort: CohortTable, seed: int) -> SplitResult:
    """50/50 split stratified on the outcome.

    Each class is split floor(k/2) / ceil(k/2); odd extras go to the evaluation
    partition for one class and, to keep partition sizes within one, to the
    pseudo-training partition for the other.  Both partitions receive at least
    one positive whenever two or more exist.
    """
    if cohort.y is None:
        raise ValueError("stratified split needs an outcome vector")
    if cohort.n < 2:
        raise ValueError("need at least 2 rows to split")
    rng = SeededRng(seed, ("split",))
    perm = rng.permutation(cohort.n)
    y = cohort.y[perm]
    pos = perm[y == 1]
    neg = perm[y != 1]

    kp, kn = len(pos), len(neg)
    # extra member of an odd class goes to evaluation; if both classes are odd
    # the negatives' extra goes to pseudo so sizes stay balanced.
    pos_pseudo = kp // 2
    neg_pseudo = kn // 2 if not (kp % 2 and kn % 2) else kn - kn // 2
    pseudo = np.concatenate([pos[:pos_pseudo], neg[:neg_pseudo]])
    evaluation = np.concatenate([pos[pos_pseudo:], neg[neg_pseudo:]])
    pseudo.sort()
    evaluation.sort()
    return SplitResult(cohort.take(pseudo), cohort.take(evaluation), pseudo, evaluation, perm)


def stratified_fraction_split(y: np.ndarray, fraction: float, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``fraction`` of each class (rounded, >=1 when the class has >=2 rows).

    Returns (kept indices, held-out indices), each sorted.
    """
    held, kept = [], []
    for cls in (0.0, 1.0):
        idx = rng.permutation(np.flatnonzero(y == cls))
        k = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        else:
            k = 0
        held.append(idx[:k])
        kept.append(idx[k:])
    return np.sort(np.concatenate(kept)), np.sort(np.concatenate(held))


# ---------------------------------------------------------------------------
# batching


class WeightedBatchSampler:
    """Class-balanced sampling with replacement.

    Each row's weight is proportional to the inverse frequency of its class, so
    in expectation half of every batch is positive.  A batch that still comes
    out with no positives gets one uniformly chosen slot overwritten with a
    uniformly chosen positive.  Iterating yields one epoch of ceil(n/batch)
    index arrays; the generator state carries over between epochs.
    """

    def __init__(self, y: np.ndarray, batch_size: int, seed: int | SeededRng):
        y = np.asarray(y, dtype=float)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.pos = np.flatnonzero(y == 1)
        self.neg = np.flatnonzero(y == 0)
        if len(self.pos) == 0 or len(self.neg) == 0:
            raise ValueError("weighted sampling needs both classes present")
        self.n = len(y)
        self.batch_size = int(batch_size)
        w = np.where(y == 1, 1.0 / len(self.pos), 1.0 / len(self.neg))
        self.weights = w / w.sum()
        self._cdf = np.cumsum(self.weights)
        self._cdf[-1] = 1.0
        self.rng = seed if isinstance(seed, SeededRng) else SeededRng(seed, ("batches",))
        self._is_pos = y == 1

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def draw(self) -> np.ndarray:
        u = self.rng.random(self.batch_size)
        idx = np.searchsorted(self._cdf, u, side="right")
        idx = np.minimum(idx, self.n - 1)
        if not self._is_pos[idx].any():
            slot = self.rng.integers(0, self.batch_size)
            idx[slot] = self.pos[self.rng.integers(0, len(self.pos))]
        return idx

    def __iter__(self) -> Iterator[np.ndarray]:
        for _ in range(self.batches_per_epoch):
            yield self.draw()


def weighted_batch_iterator(source: CohortTable, batch_size: int, seed: int) -> WeightedBatchSampler:
    if source.y is None:
        raise ValueError("weighted batching needs the source outcome")
    return WeightedBatchSampler(source.y, batch_size, seed)
