"""Tax, public-goods and penalty arithmetic.

Everything here is a pure function over small immutable value types. Money is
carried as float dollars at full precision; rounding to cents happens only when
amounts are posted to a ledger (see :func:`to_cents`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Sequence


class ScheduleError(ValueError):
    """Raised for a malformed income-tax schedule."""


class DomainError(ValueError):
    """Raised when an argument is outside the operation's domain."""


def to_cents(amount: float) -> float:
    """Round a dollar amount half-up to whole cents."""
    if not math.isfinite(amount):
        raise DomainError(f"non-finite money amount: {amount!r}")
    return float(Decimal(repr(float(amount))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


class ScheduleMode(str, Enum):
    PROGRESSIVE = "progressive"
    FLAT = "flat"


@dataclass(frozen=True)
class IncomeTaxSchedule:
    """Brackets as ``(lower_bound, rate)`` pairs; the first bound must be 0."""

    brackets: tuple[tuple[float, float], ...]
    mode: ScheduleMode = ScheduleMode.PROGRESSIVE

    def __post_init__(self) -> None:
        object.__setattr__(self, "brackets", tuple((float(b), float(r)) for b, r in self.brackets))
        object.__setattr__(self, "mode", ScheduleMode(self.mode))
        self.validate()

    def validate(self) -> None:
        if not self.brackets:
            raise ScheduleError("schedule has no brackets")
        if self.brackets[0][0] != 0.0:
            raise ScheduleError("first bracket must start at 0")
        bounds = [b for b, _ in self.brackets]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ScheduleError("bracket lower bounds must be strictly increasing")
        if any(not 0.0 <= r <= 1.0 for _, r in self.brackets):
            raise ScheduleError("bracket rates must lie in [0, 1]")
        if self.mode is ScheduleMode.FLAT and len(self.brackets) != 1:
            raise ScheduleError("a flat schedule has exactly one bracket")

    @classmethod
    def flat(cls, rate: float) -> "IncomeTaxSchedule":
        return cls(((0.0, rate),), ScheduleMode.FLAT)

    @property
    def top_rate(self) -> float:
        return max(r for _, r in self.brackets)

    def marginal_rate(self, gross: float) -> float:
        rate = self.brackets[0][1]
        for lower, r in self.brackets:
            if gross >= lower:
                rate = r
        return rate


# 2023 single-filer federal brackets. Table bounds are "$11,001 .. $44,725" etc;
# taxable dollars above 11,000 fall in the second bracket.
US_2023_BRACKETS: tuple[tuple[float, float], ...] = (
    (0.0, 0.10),
    (11_000.0, 0.12),
    (44_725.0, 0.22),
    (95_375.0, 0.24),
    (182_100.0, 0.32),
    (231_250.0, 0.35),
    (578_125.0, 0.37),
)


def compute_income_tax(gross: float, schedule: IncomeTaxSchedule) -> float:
    """Total tax owed on ``gross``; each bracket taxes only the slice inside it.

    Slices are summed in decimal arithmetic so half-cent ties round the same
    way they would on paper.
    """
    if gross < 0 or not math.isfinite(gross):
        raise DomainError(f"gross income must be finite and >= 0, got {gross!r}")
    schedule.validate()
    g = _dec(gross)
    if schedule.mode is ScheduleMode.FLAT:
        return float(_dec(schedule.brackets[0][1]) * g)
    owed = Decimal(0)
    bounds = [_dec(b) for b, _ in schedule.brackets]
    for i, (_, rate) in enumerate(schedule.brackets):
        lower = bounds[i]
        if g <= lower:
            break
        upper = bounds[i + 1] if i + 1 < len(bounds) else g
        owed += _dec(rate) * (min(g, upper) - lower)
    return float(owed)


def _dec(x: float) -> Decimal:
    return Decimal(repr(float(x)))


@dataclass(frozen=True)
class SalesTaxRate:
    rate: float

    def __post_init__(self) -> None:
        if not (self.rate >= 0 and math.isfinite(self.rate)):
            raise DomainError(f"sales tax rate must be >= 0, got {self.rate!r}")


def compute_sales_tax(price: float, rate: SalesTaxRate) -> float:
    if price < 0:
        raise DomainError(f"price must be >= 0, got {price!r}")
    return rate.rate * price


class PublicGoodsKind(str, Enum):
    LINEAR = "linear"
    CAPITALIST_LOG = "capitalist_log"
    SOCIALIST = "socialist"
    CUSTOM_TABLE = "custom_table"


class PublicGoodsMode(str, Enum):
    INDIVIDUAL = "individual"
    POOLED = "pooled"


@dataclass(frozen=True)
class PublicGoodsFunction:
    """Maps tax dollars to perceived public-goods utility.

    ``k`` is the slope of the linear variant, ``tau_star`` the redistribution
    anchor of the socialist variant, and ``points`` the ``(tau, value)`` knots
    of a custom piecewise-linear table.
    """

    kind: PublicGoodsKind = PublicGoodsKind.LINEAR
    k: float = 1.0
    tau_star: float = 0.0
    points: tuple[tuple[float, float], ...] = field(default_factory=tuple)
    mode: PublicGoodsMode = PublicGoodsMode.INDIVIDUAL

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PublicGoodsKind(self.kind))
        object.__setattr__(self, "mode", PublicGoodsMode(self.mode))
        object.__setattr__(self, "points", tuple((float(a), float(b)) for a, b in self.points))
        if self.kind is PublicGoodsKind.LINEAR and self.k < 0:
            raise DomainError("linear public-goods slope must be >= 0")
        if self.kind is PublicGoodsKind.CUSTOM_TABLE:
            xs = [p[0] for p in self.points]
            ys = [p[1] for p in self.points]
            if len(xs) < 2 or any(b <= a for a, b in zip(xs, xs[1:])):
                raise DomainError("custom table needs >= 2 knots with increasing tau")
            if any(b < a for a, b in zip(ys, ys[1:])):
                raise DomainError("custom table values must be non-decreasing")

    @classmethod
    def linear(cls, k: float, mode: PublicGoodsMode | str = PublicGoodsMode.INDIVIDUAL) -> "PublicGoodsFunction":
        return cls(PublicGoodsKind.LINEAR, k=k, mode=mode)

    def describe(self) -> str:
        if self.kind is PublicGoodsKind.LINEAR:
            return f"every tax dollar paid returns {self.k:g} dollars of public-goods value"
        if self.kind is PublicGoodsKind.CAPITALIST_LOG:
            return "public-goods value grows as tau*ln(tau) in taxes paid"
        if self.kind is PublicGoodsKind.SOCIALIST:
            return f"public-goods value is tau*({self.tau_star:g} - ln(tau)), favouring small contributors"
        return "public-goods value follows a fixed piecewise-linear table"


def public_goods_value(f: PublicGoodsFunction, tau: float) -> float:
    if tau < 0:
        raise DomainError(f"tax amount must be >= 0, got {tau!r}")
    if f.kind is PublicGoodsKind.LINEAR:
        return f.k * tau
    if f.kind is PublicGoodsKind.CAPITALIST_LOG:
        return tau * math.log(max(tau, 1.0))
    if f.kind is PublicGoodsKind.SOCIALIST:
        return tau * (f.tau_star - math.log(max(tau, 1.0)))
    xs = [p[0] for p in f.points]
    ys = [p[1] for p in f.points]
    if tau <= xs[0]:
        return ys[0]
    if tau >= xs[-1]:
        # extend the last segment's slope
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return ys[-1] + slope * (tau - xs[-1])
    for (x0, y0), (x1, y1) in zip(f.points, f.points[1:]):
        if x0 <= tau <= x1:
            return y0 + (y1 - y0) * (tau - x0) / (x1 - x0)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class EnforcementPolicy:
    audit_probability: float = 0.1
    penalty_rate: float = 0.75
    fixed_fine: float = 100_000.0
    audit_period: int = 365

    def __post_init__(self) -> None:
        if not 0.0 <= self.audit_probability <= 1.0:
            raise DomainError("audit probability must lie in [0, 1]")
        if self.penalty_rate < 0:
            raise DomainError("penalty rate must be >= 0")
        if self.fixed_fine < 0:
            raise DomainError("fixed fine must be >= 0")
        if int(self.audit_period) != self.audit_period or self.audit_period < 1:
            raise DomainError("audit period must be a positive integer")


def compute_penalty(evasion_gap: float, policy: EnforcementPolicy) -> float:
    """Penalty for a discovered gap. Back taxes themselves are waived, not collected."""
    if evasion_gap < 0:
        raise DomainError(f"evasion gap must be >= 0, got {evasion_gap!r}")
    if evasion_gap == 0:
        return 0.0
    return policy.penalty_rate * evasion_gap + policy.fixed_fine


@dataclass(frozen=True)
class Good:
    id: int
    name: str
    price: float
    weight: float

    def __post_init__(self) -> None:
        if not self.price > 0:
            raise DomainError(f"good {self.id} price must be > 0")
        if self.weight < 0:
            raise DomainError(f"good {self.id} weight must be >= 0")


def normalize_weights(goods: Sequence[Good]) -> list[Good]:
    total = sum(g.weight for g in goods)
    if total <= 0:
        raise DomainError("catalog weights sum to zero")
    if abs(total - 1.0) <= 1e-12:
        return list(goods)
    return [Good(g.id, g.name, g.price, g.weight / total) for g in goods]
