"""Descriptive aggregates and the two-sided Mann-Whitney U test."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EXACT_MAX_N = 8


class StatsDomainError(ValueError):
    pass


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p: float
    method: str  # "exact" or "normal"


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def u_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    """U for sample ``a``: pairs (x in a, y in b) with x > y, ties counting one half."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = _ranks(np.concatenate([a, b]))
    return float(r[: len(a)].sum() - len(a) * (len(a) + 1) / 2.0)


def _exact_p(a: np.ndarray, b: np.ndarray, u_obs: float) -> float:
    """Two-sided p over every relabelling of the pooled sample."""
    pooled = np.concatenate([a, b])
    n_a, n = len(a), len(a) + len(b)
    r = _ranks(pooled)
    mean_u = n_a * (n - n_a) / 2.0
    dev_obs = abs(u_obs - mean_u)
    offset = n_a * (n_a + 1) / 2.0
    hits = total = 0
    for idx in itertools.combinations(range(n), n_a):
        u = r[list(idx)].sum() - offset
        total += 1
        if abs(u - mean_u) >= dev_obs - 1e-9:
            hits += 1
    return hits / total


def _normal_p(a: np.ndarray, b: np.ndarray, u_obs: float) -> float:
    n_a, n_b = len(a), len(b)
    n = n_a + n_b
    mean_u = n_a * n_b / 2.0
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie = float(((counts**3) - counts).sum())
    var = n_a * n_b / 12.0 * ((n + 1) - tie / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return 1.0
    z = (abs(u_obs - mean_u) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mann_whitney_u(a: Sequence[float], b: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test; U is reported for sample ``a``.

    ``auto`` enumerates all relabellings when both samples have at most eight
    values and otherwise uses the tie-corrected normal approximation with a
    continuity correction.
    """
    if len(a) == 0 or len(b) == 0:
        raise StatsDomainError("Mann-Whitney U needs two non-empty samples")
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise StatsDomainError("samples must be finite")
    u = u_statistic(x, y)
    if method == "auto":
        method = "exact" if max(len(x), len(y)) <= EXACT_MAX_N else "normal"
    if method == "exact":
        return MannWhitneyResult(u, _exact_p(x, y, u), "exact")
    if method == "normal":
        return MannWhitneyResult(u, _normal_p(x, y, u), "normal")
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    std: float
    p5: float
    p50: float
    p95: float
    single_run: bool

    def as_dict(self) -> dict:
        return {
            "n": self.n, "mean": self.mean, "std": self.std,
            "p5": self.p5, "p50": self.p50, "p95": self.p95, "single_run": self.single_run,
        }


def aggregate(values: Sequence[float]) -> Summary:
    """Sample mean, n-1 standard deviation and 5/50/95th percentiles.

    Values are sorted first, so any permutation of the same runs gives
    bit-identical output. A single run reports std 0 and sets ``single_run``.
    """
    if len(values) == 0:
        raise StatsDomainError("aggregate needs at least one value")
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    mean = float(math.fsum(v) / n)
    std = float(math.sqrt(math.fsum((v - mean) ** 2) / (n - 1))) if n > 1 else 0.0
    q = np.percentile(v, [5, 50, 95])
    return Summary(n, mean, std, float(q[0]), float(q[1]), float(q[2]), n == 1)


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    if len(x) != len(y) or len(x) < 2:
        raise StatsDomainError("spearman needs two equal-length samples of size >= 2")
    rx = _ranks(np.asarray(x, dtype=float))
    ry = _ranks(np.asarray(y, dtype=float))
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return float(rx @ ry) / den if den > 0 else 0.0
