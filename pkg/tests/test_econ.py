import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fraction_to_cents, per_dollar_income_tax
from taxsim.econ import (
    US_2023_BRACKETS,
    DomainError,
    EnforcementPolicy,
    Good,
    IncomeTaxSchedule,
    PublicGoodsFunction,
    PublicGoodsKind,
    SalesTaxRate,
    ScheduleError,
    ScheduleMode,
    compute_income_tax,
    compute_penalty,
    compute_sales_tax,
    normalize_weights,
    public_goods_value,
    to_cents,
)

US = IncomeTaxSchedule(US_2023_BRACKETS)


class TestIncomeTax:
    def test_fifty_thousand_matches_hand_computation(self):
        # 1100 + 0.12 * 33725 + 0.22 * 5275
        assert to_cents(compute_income_tax(50_000, US)) == 6307.50

    def test_zero_income(self):
        assert compute_income_tax(0, US) == 0.0

    def test_bracket_edges(self):
        assert compute_income_tax(11_000, US) == pytest.approx(1100.0)
        assert compute_income_tax(11_001, US) == pytest.approx(1100.12)

    def test_top_bracket_applies_from_578126(self):
        a = compute_income_tax(578_125, US)
        b = compute_income_tax(578_126, US)
        assert b - a == pytest.approx(0.37)
        assert US.marginal_rate(578_126) == 0.37
        assert US.top_rate == 0.37

    def test_flat_schedule(self):
        flat = IncomeTaxSchedule.flat(0.2)
        assert flat.mode is ScheduleMode.FLAT
        assert compute_income_tax(12_345, flat) == pytest.approx(2469.0)

    def test_matches_per_dollar_oracle(self):
        rng = np.random.default_rng(11)
        for cents in rng.integers(0, 70_000_000, 200):
            income = int(cents) / 100
            assert to_cents(compute_income_tax(income, US)) == fraction_to_cents(
                per_dollar_income_tax(int(cents), US_2023_BRACKETS))

    @pytest.mark.parametrize("bad", [-1.0, math.inf, math.nan])
    def test_rejects_bad_income(self, bad):
        with pytest.raises(DomainError):
            compute_income_tax(bad, US)

    def test_rejects_unsorted_brackets(self):
        with pytest.raises(ScheduleError):
            IncomeTaxSchedule(((0, 0.1), (5000, 0.2), (4000, 0.3)))

    def test_rejects_nonzero_start(self):
        with pytest.raises(ScheduleError):
            IncomeTaxSchedule(((100, 0.1),))

    @given(st.floats(0, 2_000_000), st.floats(0, 2_000_000))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert compute_income_tax(lo, US) <= compute_income_tax(hi, US) + 1e-9

    @given(st.floats(0, 2_000_000))
    def test_average_rate_bounded_by_top_rate(self, x):
        assert compute_income_tax(x, US) <= US.top_rate * x + 1e-9

    @given(st.floats(1, 2_000_000), st.floats(0.01, 1000))
    def test_marginal_slope_bounded(self, x, dx):
        slope = (compute_income_tax(x + dx, US) - compute_income_tax(x, US)) / dx
        assert 0.10 - 1e-6 <= slope <= 0.37 + 1e-6


class TestSalesAndPenalty:
    def test_sales_tax(self):
        assert compute_sales_tax(100.0, SalesTaxRate(0.0644)) == pytest.approx(6.44)

    def test_sales_rejects_negative_price(self):
        with pytest.raises(DomainError):
            compute_sales_tax(-1.0, SalesTaxRate(0.05))

    def test_penalty_formula(self):
        pol = EnforcementPolicy(0.1, 0.75, 100_000, 365)
        assert compute_penalty(1000, pol) == pytest.approx(100_750)

    def test_clean_audit_has_no_fine(self):
        assert compute_penalty(0.0, EnforcementPolicy()) == 0.0

    def test_penalty_rejects_negative_gap(self):
        with pytest.raises(DomainError):
            compute_penalty(-1.0, EnforcementPolicy())

    @given(st.floats(0, 1e7), st.floats(0, 1e7))
    def test_penalty_monotone_in_gap(self, a, b):
        pol = EnforcementPolicy(0.5, 0.75, 10.0, 30)
        lo, hi = sorted((a, b))
        assert compute_penalty(lo, pol) <= compute_penalty(hi, pol)

    def test_policy_rejects_bad_probability(self):
        with pytest.raises(DomainError):
            EnforcementPolicy(audit_probability=1.5)


class TestPublicGoods:
    def test_linear(self):
        assert public_goods_value(PublicGoodsFunction.linear(2.0), 50.0) == 100.0

    def test_capitalist_log(self):
        f = PublicGoodsFunction(PublicGoodsKind.CAPITALIST_LOG)
        assert public_goods_value(f, math.e**2) == pytest.approx(2 * math.e**2)

    def test_log_variants_clamp_below_one(self):
        f = PublicGoodsFunction(PublicGoodsKind.CAPITALIST_LOG)
        assert public_goods_value(f, 0.5) == 0.0
        s = PublicGoodsFunction(PublicGoodsKind.SOCIALIST, tau_star=3.0)
        assert public_goods_value(s, 0.5) == pytest.approx(1.5)

    def test_socialist(self):
        f = PublicGoodsFunction(PublicGoodsKind.SOCIALIST, tau_star=10.0)
        assert public_goods_value(f, 100.0) == pytest.approx(100 * (10 - math.log(100)))

    def test_custom_table_interpolates_and_extends(self):
        f = PublicGoodsFunction(PublicGoodsKind.CUSTOM_TABLE, points=((0, 0), (10, 20), (20, 25)))
        assert public_goods_value(f, 5) == 10.0
        assert public_goods_value(f, 15) == 22.5
        assert public_goods_value(f, 30) == 30.0

    def test_custom_table_rejects_decreasing(self):
        with pytest.raises(DomainError):
            PublicGoodsFunction(PublicGoodsKind.CUSTOM_TABLE, points=((0, 5), (1, 4)))

    def test_rejects_negative_tax(self):
        with pytest.raises(DomainError):
            public_goods_value(PublicGoodsFunction.linear(1.0), -1.0)

    @settings(max_examples=50)
    @given(st.sampled_from([
        PublicGoodsFunction.linear(0.75),
        PublicGoodsFunction(PublicGoodsKind.CAPITALIST_LOG),
        PublicGoodsFunction(PublicGoodsKind.CUSTOM_TABLE, points=((0, 0), (1, 3), (4, 4))),
    ]), st.floats(0, 1e6), st.floats(0, 1e6))
    def test_non_decreasing_variants(self, f, a, b):
        lo, hi = sorted((a, b))
        assert public_goods_value(f, lo) <= public_goods_value(f, hi) + 1e-6


class TestMoney:
    @pytest.mark.parametrize("x, want", [(0.005, 0.01), (1.234, 1.23), (2.675, 2.68), (-0.005, -0.01)])
    def test_half_up_rounding(self, x, want):
        assert to_cents(x) == want

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            to_cents(math.nan)


def test_normalize_weights():
    goods = [Good(1, "a", 1.0, 2.0), Good(2, "b", 1.0, 6.0)]
    out = normalize_weights(goods)
    assert [g.weight for g in out] == [0.25, 0.75]
    assert normalize_weights(out) == out
