"""Pearson/Spearman correlation with Student-t p-values and least-squares fits."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from crossflow.errors import ContractError, DegenerateInputError

EXACT_PERMUTATION_MAX_N = 10


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ContractError(f"df must be >= 1, got {df}")
    t = float(t)
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return tail if t >= 0 else 1.0 - tail


def correlation_p_value(r: float, n: int) -> float:
    """Two-sided p for H0: no correlation, via t = r sqrt(n-2) / sqrt(1-r^2)."""
    if n < 3:
        raise ContractError(f"p-value needs n >= 3, got {n}")
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt(n - 2) / math.sqrt(1.0 - r * r)
    return min(1.0, 2.0 * student_t_sf(abs(t), n - 2))


def _as_pair(xs, ys, min_n: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise ContractError(f"series lengths differ: {len(x)} vs {len(y)}")
    if len(x) < min_n:
        raise ContractError(f"need at least {min_n} points, got {len(x)}")
    return x, y


def _r(x: np.ndarray, y: np.ndarray) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson(xs, ys) -> tuple[float, float]:
    x, y = _as_pair(xs, ys, 3)
    r = _r(x, y)
    return r, correlation_p_value(r, len(x))


def rank(xs) -> np.ndarray:
    """1-based ranks; ties share their mean rank."""
    return rankdata(np.asarray(xs, dtype=np.float64), method="average")


def _exact_spearman_p(rx: np.ndarray, ry: np.ndarray, rho: float) -> float:
    dx = rx - rx.mean()
    denom = math.sqrt(float(dx @ dx) * float(((ry - ry.mean()) ** 2).sum()))
    hits = total = 0
    target = abs(rho) - 1e-12
    chunk = 50_000
    perms = itertools.permutations(ry)
    while True:
        block = np.array(list(itertools.islice(perms, chunk)), dtype=np.float64)
        if block.size == 0:
            break
        rhos = (block - ry.mean()) @ dx / denom
        hits += int(np.count_nonzero(np.abs(rhos) >= target))
        total += len(block)
    return hits / total


def spearman(xs, ys, exact: bool = False) -> tuple[float, float]:
    """Rank correlation; p from the t approximation, or by full permutation when ``exact``."""
    x, y = _as_pair(xs, ys, 3)
    rx, ry = rank(x), rank(y)
    rho = _r(rx, ry)
    if exact:
        if len(x) > EXACT_PERMUTATION_MAX_N:
            raise ContractError(f"exact permutation p limited to n <= {EXACT_PERMUTATION_MAX_N}")
        return rho, _exact_spearman_p(rx, ry, rho)
    return rho, correlation_p_value(rho, len(x))


def linear_fit(xs, ys) -> tuple[float, float]:
    """Ordinary least squares y = slope * x + intercept."""
    x, y = _as_pair(xs, ys, 2)
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DegenerateInputError("linear fit undefined for constant x")
    slope = float(dx @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


@dataclass
class CorrelationReport:
    n: int
    pearson_r: float
    pearson_p: float
    spearman_rho: float
    spearman_p: float
    fit_slope: float
    fit_intercept: float
    points: list[dict] = field(default_factory=list)

    @classmethod
    def build(cls, lpips_values: Sequence[float], map_means: Sequence[float], points: Sequence[dict] | None = None) -> "CorrelationReport":
        r, rp = pearson(lpips_values, map_means)
        rho, sp = spearman(lpips_values, map_means)
        slope, intercept = linear_fit(lpips_values, map_means)
        return cls(len(lpips_values), r, rp, rho, sp, slope, intercept, list(points or []))

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "pearson": {"r": self.pearson_r, "p": self.pearson_p},
            "spearman": {"rho": self.spearman_rho, "p": self.spearman_p},
            "fit": {"slope": self.fit_slope, "intercept": self.fit_intercept},
            "points": self.points,
        }
