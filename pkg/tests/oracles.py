"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np


_PREFIX: dict[tuple, np.ndarray] = {}


def _dollar_prefix(brackets, whole: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative integer-percent tax of dollars ``0 .. d-1`` for every ``d``."""
    key = tuple(brackets)
    lowers = np.array([b for b, _ in brackets])
    pct = np.array([round(r * 100) for _, r in brackets], dtype=np.int64)
    cum = _PREFIX.get(key)
    if cum is None or len(cum) <= whole:
        n = max(whole + 1, 1_000_001)
        rates = pct[np.searchsorted(lowers, np.arange(n), side="right") - 1]
        cum = np.concatenate([[0], np.cumsum(rates)])
        _PREFIX[key] = cum
    return cum, lowers, pct


def per_dollar_income_tax(income_cents: int, brackets) -> Fraction:
    """Exact tax: the marginal rate of every whole dollar, then the cents tail.

    Dollar ``d`` (covering ``(d, d+1]``) is taxed at the rate of the highest
    bracket whose lower bound is <= d. Rates are taken as exact percentages.
    """
    whole, tail = divmod(income_cents, 100)
    cum, lowers, pct = _dollar_prefix(brackets, whole)
    total = Fraction(int(cum[whole]), 100)
    if tail:
        last = pct[np.searchsorted(lowers, whole, side="right") - 1]
        total += Fraction(int(last) * tail, 10_000)
    return total


def fraction_to_cents(x: Fraction) -> float:
    d = Decimal(x.numerator) / Decimal(x.denominator)
    return float(d.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def exact_mann_whitney(a, b):
    """U for ``a`` by pair counting and the two-sided p by full enumeration."""
    def u_of(x, y):
        return sum(1.0 if xi > yi else 0.5 if xi == yi else 0.0 for xi in x for yi in y)

    u = u_of(a, b)
    pooled = list(a) + list(b)
    n, na = len(pooled), len(a)
    centre = na * (n - na) / 2.0
    hits = total = 0
    for idx in itertools.combinations(range(n), na):
        chosen = set(idx)
        x = [pooled[i] for i in idx]
        y = [pooled[i] for i in range(n) if i not in chosen]
        total += 1
        if abs(u_of(x, y) - centre) >= abs(u - centre) - 1e-9:
            hits += 1
    return u, hits / total


def finite_difference_error(net, x: np.ndarray, upstream: np.ndarray, h: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences.

    The scalar under test is ``sum(upstream * net.forward(x))``.
    """
    _, acts = net.forward_cached(x)
    analytic = net.backward(acts, upstream)
    worst = 0.0
    for param, grad in zip(net.params, analytic):
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + h
            up = float((upstream * net.forward(x)).sum())
            param[idx] = old - h
            down = float((upstream * net.forward(x)).sum())
            param[idx] = old
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), abs(grad[idx]), 1e-3)
            worst = max(worst, abs(numeric - grad[idx]) / denom)
    return worst


def fixed_batch_losses(policy, rng: np.random.Generator, iterations: int = 100, size: int = 64):
    """Loss trace of ``iterations`` steps on one random batch, plus the final loss."""
    from taxsim.dqn import STATE_DIM, train_step

    batch = (rng.normal(size=(size, STATE_DIM)), rng.integers(0, policy.n_actions, size),
             rng.normal(size=size), rng.normal(size=(size, STATE_DIM)), rng.random(size) < 0.1)
    return [train_step(policy, batch) for _ in range(iterations + 1)]
