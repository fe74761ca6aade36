"""Pearson and Spearman correlation tests with two-sided p-values.

The t-distribution tail is computed from the regularized incomplete beta
function, evaluated with the modified Lentz continued fraction. For
Spearman with ``n <= EXACT_MAX_N`` the p-value instead comes from
enumerating every permutation of the second rank vector.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateRepresentationError, PreconditionError

EXACT_MAX_N = 8
ALPHA = 0.05

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000
# |rho| comparisons in the permutation count; rank correlations are
# rationals with small denominators, so this only absorbs rounding.
_TIE_TOL = 1e-10


@dataclass(frozen=True)
class CorrelationResult:
    method: str  # "spearman" | "pearson"
    coefficient: float
    p_value: float
    n: int
    p_method: str  # "t-approx" | "exact-permutation"

    def significant(self, alpha: float = ALPHA) -> bool:
        return self.p_value < alpha


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)`` for ``a, b > 0``."""
    if not (a > 0 and b > 0):
        raise PreconditionError("betainc_reg needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the continued fraction converges fast only on the near side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise PreconditionError("df must be >= 1")
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, betainc_reg(df / 2.0, 0.5, df / (df + t * t))))


def _t_p_from_r(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return t_two_sided_p(t, n - 2)


def _prepare(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise PreconditionError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise PreconditionError(f"need n >= 3 observations, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise PreconditionError("non-finite observation")
    return x, y


def _corr(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateRepresentationError("zero variance series")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def pearson(xs, ys) -> CorrelationResult:
    x, y = _prepare(xs, ys)
    r = _corr(x, y)
    return CorrelationResult("pearson", r, _t_p_from_r(r, x.size), int(x.size), "t-approx")


def rank_average(values) -> np.ndarray:
    """1-based ranks, ties receiving the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.size)
    start = 0
    for end in range(1, v.size + 1):
        if end == v.size or sorted_v[end] != sorted_v[start]:
            ranks[order[start:end]] = (start + end + 1) / 2.0
            start = end
    return ranks


@lru_cache(maxsize=EXACT_MAX_N + 1)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.intp)


def _exact_rank_p(rx: np.ndarray, ry: np.ndarray, rho: float) -> float:
    perms = _permutations(rx.size)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    rhos = (dy[perms] @ dx) / denom
    hits = np.count_nonzero(np.abs(rhos) >= abs(rho) - _TIE_TOL)
    return hits / perms.shape[0]


def spearman(xs, ys) -> CorrelationResult:
    """Rank correlation with mid-rank ties.

    p-value is exact over all ``n!`` rank orders when ``n <= 8``, otherwise
    the t approximation used by :func:`pearson`.
    """
    x, y = _prepare(xs, ys)
    rx, ry = rank_average(x), rank_average(y)
    rho = _corr(rx, ry)
    n = int(x.size)
    if n <= EXACT_MAX_N:
        return CorrelationResult("spearman", rho, _exact_rank_p(rx, ry, rho), n, "exact-permutation")
    return CorrelationResult("spearman", rho, _t_p_from_r(rho, n), n, "t-approx")


@dataclass(frozen=True)
class DriftCorrelation:
    spearman: CorrelationResult
    pearson: CorrelationResult
    alpha: float = ALPHA

    @property
    def drift_explained(self) -> bool:
        """Spearman-significant association between drift norm and anisotropy."""
        return self.spearman.p_value < self.alpha

    @property
    def verdict(self) -> str:
        return "drift-explained" if self.drift_explained else "not significantly affected"


def drift_correlation(layer_report) -> DriftCorrelation:
    """Correlate per-layer drift norm with per-layer mean cosine.

    ``layer_report`` is a sequence of ``(drift_norm, mean_cosine)`` pairs,
    one per layer.
    """
    report = list(layer_report)
    if len(report) < 3:
        raise PreconditionError(f"need >= 3 layers for a correlation, got {len(report)}")
    drift = [float(r[0]) for r in report]
    cos = [float(r[1]) for r in report]
    return DriftCorrelation(spearman(drift, cos), pearson(drift, cos))
