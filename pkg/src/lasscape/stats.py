"""Distribution and correlation statistics over fitness values and pair tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .similarity import METRIC_FIELDS, SimilarityPair

CORRELATION_FIELDS = METRIC_FIELDS + ("delta",)
SUMMARY_FIELDS = ("delta_signed", "delta_abs", "dataflow_match")
OPERATOR_ORDER = ("E1", "E2", "M1", "M2")
BANDWIDTH_FLOOR = 1e-6


class EmptyInput(ValueError):
    pass


class DegenerateSample(ValueError):
    def __init__(self, message: str, metric: str | None = None):
        super().__init__(message)
        self.metric = metric


def normalize_fitness(values: Sequence[float]) -> list[float]:
    """Min-max scale to [0, 1]; a constant sample maps to all zeros."""
    if len(values) == 0:
        raise EmptyInput("no values to normalize")
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return [0.0] * len(arr)
    return [float(v) for v in (arr - lo) / (hi - lo)]


def histogram(values: Sequence[float], bins: int) -> tuple[list[float], list[int]]:
    """Equal-width bins over [min, max]; the last bin includes its right edge."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(values) == 0:
        raise EmptyInput("no values to bin")
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return [float(e) for e in edges], [int(c) for c in counts]


def silverman_bandwidth(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1))
    q75, q25 = np.percentile(arr, [75, 25])
    spread = min(sd, float(q75 - q25) / 1.34)
    return max(0.9 * spread * len(arr) ** (-0.2), BANDWIDTH_FLOOR)


def kde(values: Sequence[float], grid: Sequence[float]) -> list[float]:
    """Gaussian kernel density at each grid point (Silverman bandwidth)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2 or float(arr.std()) == 0.0:
        raise DegenerateSample("KDE needs at least two distinct values", "kde")
    h = silverman_bandwidth(arr)
    z = (np.asarray(grid, dtype=np.float64)[:, None] - arr[None, :]) / h
    dens = np.exp(-0.5 * z**2) / math.sqrt(2 * math.pi) / h
    return [float(d) for d in dens.mean(axis=1)]


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise ValueError("pearson needs equal-length inputs")
    if len(x) < 2:
        raise DegenerateSample("pearson needs at least two points", "pearson")
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    dx, dy = xa - xa.mean(), ya - ya.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSample("pearson is undefined for a constant input", "pearson")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def winsorize(values: Sequence[float], lower: float = 1.0, upper: float = 99.0) -> list[float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return []
    lo, hi = np.percentile(arr, [lower, upper])
    return [float(v) for v in np.clip(arr, lo, hi)]


@dataclass
class CorrelationMatrix:
    fields: tuple[str, ...]
    values: list[list[float | None]]
    counts: list[list[int]]
    missing: list[tuple[str, str]] = field(default_factory=list)

    def get(self, a: str, b: str) -> float | None:
        return self.values[self.fields.index(a)][self.fields.index(b)]


def correlation_matrix(
    pairs: Sequence[SimilarityPair], signed_delta: bool = False, winsorize_delta: bool = True
) -> CorrelationMatrix:
    """Pearson correlations among the four similarity metrics and the delta.

    Each cell uses the rows where both columns are present.  Degenerate cells
    are ``None`` and listed in ``missing``.
    """
    delta_name = "delta_signed" if signed_delta else "delta_abs"
    columns: dict[str, list[float | None]] = {m: [getattr(p, m) for p in pairs] for m in METRIC_FIELDS}
    delta = [getattr(p, delta_name) for p in pairs]
    columns["delta"] = winsorize(delta) if winsorize_delta else delta
    names = CORRELATION_FIELDS
    k = len(names)
    values: list[list[float | None]] = [[None] * k for _ in range(k)]
    counts = [[0] * k for _ in range(k)]
    missing = []
    for i in range(k):
        for j in range(i, k):
            xs, ys = [], []
            for a, b in zip(columns[names[i]], columns[names[j]]):
                if a is not None and b is not None:
                    xs.append(a)
                    ys.append(b)
            counts[i][j] = counts[j][i] = len(xs)
            if i == j:
                values[i][i] = 1.0
                continue
            try:
                r = pearson(xs, ys)
            except DegenerateSample:
                missing.append((names[i], names[j]))
                continue
            values[i][j] = values[j][i] = r
    return CorrelationMatrix(names, values, counts, missing)


def regression_line(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope and intercept (for scatter overlays)."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.size < 2 or float(np.ptp(xa)) == 0.0:
        raise DegenerateSample("regression needs a nonconstant x", "regression")
    slope, intercept = np.polyfit(xa, ya, 1)
    return float(slope), float(intercept)


@dataclass(frozen=True)
class BoxStats:
    count: int
    median: float | None = None
    q1: float | None = None
    q3: float | None = None
    min: float | None = None
    max: float | None = None


def box_stats(values: Sequence[float]) -> BoxStats:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return BoxStats(0)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return BoxStats(int(arr.size), float(med), float(q1), float(q3), float(arr.min()), float(arr.max()))


def operator_summary(pairs: Sequence[SimilarityPair]) -> dict[str, dict[str, BoxStats]]:
    """Box-plot statistics per operator for delta_signed, delta_abs and dataflow_match."""
    ops = list(OPERATOR_ORDER) + sorted({p.operator for p in pairs} - set(OPERATOR_ORDER))
    out: dict[str, dict[str, BoxStats]] = {}
    for op in ops:
        rows = [p for p in pairs if p.operator == op]
        out[op] = {name: box_stats([getattr(p, name) for p in rows]) for name in SUMMARY_FIELDS}
    return out
