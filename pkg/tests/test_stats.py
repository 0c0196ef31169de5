import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exact_mann_whitney
from taxsim.stats import StatsDomainError, aggregate, mann_whitney_u, spearman_rho, u_statistic

scipy_stats = pytest.importorskip("scipy.stats")


class TestMannWhitney:
    def test_textbook_example(self):
        r = mann_whitney_u([19, 22, 16, 29, 24], [20, 11, 17, 12])
        assert r.u == 17.0
        assert r.p == pytest.approx(0.1111, abs=1e-4)
        assert r.method == "exact"

    def test_complete_separation(self):
        r = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert r.u == 0.0
        assert r.p == pytest.approx(0.1)

    def test_matches_oracle_on_every_small_size(self):
        rng = np.random.default_rng(11)
        for n_a, n_b in itertools.product(range(1, 7), repeat=2):
            a = rng.integers(0, 6, n_a).tolist()
            b = rng.integers(0, 6, n_b).tolist()
            u, p = exact_mann_whitney(a, b)
            r = mann_whitney_u(a, b, method="exact")
            assert r.u == u
            assert r.p == pytest.approx(p, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=7),
           st.lists(st.floats(-100, 100), min_size=1, max_size=7))
    def test_exact_matches_scipy(self, a, b):
        if len(set(a + b)) < len(a + b):
            return  # tied samples are covered by the enumeration oracle
        ref = scipy_stats.mannwhitneyu(a, b, alternative="two-sided", method="exact")
        r = mann_whitney_u(a, b, method="exact")
        assert r.u == ref.statistic
        assert r.p == pytest.approx(ref.pvalue, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=9, max_size=40),
           st.lists(st.integers(0, 50), min_size=9, max_size=40))
    def test_normal_matches_scipy(self, a, b):
        if len(set(a + b)) == 1:
            return
        ref = scipy_stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
        r = mann_whitney_u(a, b)
        assert r.method == "normal"
        assert r.u == ref.statistic
        assert r.p == pytest.approx(ref.pvalue, abs=1e-9)

    def test_exact_and_normal_agree_at_eight(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=8)
            b = rng.normal(0.5, size=8)
            e = mann_whitney_u(a, b, method="exact").p
            n = mann_whitney_u(a, b, method="normal").p
            assert abs(e - n) < 0.02

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20),
           st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    def test_u_symmetry(self, a, b):
        assert u_statistic(a, b) + u_statistic(b, a) == pytest.approx(len(a) * len(b))
        assert 0.0 <= mann_whitney_u(a, b).p <= 1.0

    def test_identical_samples(self):
        assert mann_whitney_u([5.0] * 20, [5.0] * 20).p == 1.0

    def test_domain_errors(self):
        with pytest.raises(StatsDomainError):
            mann_whitney_u([], [1.0])
        with pytest.raises(StatsDomainError):
            mann_whitney_u([float("nan")], [1.0])
        with pytest.raises(ValueError):
            mann_whitney_u([1.0], [2.0], method="bogus")


class TestAggregate:
    def test_known_values(self):
        s = aggregate([1.0, 2.0, 3.0, 4.0])
        assert s.mean == 2.5
        assert s.std == pytest.approx(np.std([1, 2, 3, 4], ddof=1))
        assert s.p50 == 2.5 and not s.single_run

    def test_single_run(self):
        s = aggregate([0.3])
        assert s.std == 0.0 and s.single_run and s.p5 == s.p95 == 0.3

    def test_empty(self):
        with pytest.raises(StatsDomainError):
            aggregate([])

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e9, 1e9), min_size=1, max_size=50), st.randoms())
    def test_permutation_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        assert aggregate(values) == aggregate(shuffled)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
    def test_ordering(self, values):
        s = aggregate(values)
        assert min(values) <= s.p5 <= s.p50 <= s.p95 <= max(values)
        assert s.std >= 0


def test_spearman():
    assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    x = [1, 2, 3, 4, 5, 5, 7]
    y = [2, 1, 4, 3, 7, 6, 6]
    assert spearman_rho(x, y) == pytest.approx(scipy_stats.spearmanr(x, y).statistic)
    with pytest.raises(StatsDomainError):
        spearman_rho([1], [1])
