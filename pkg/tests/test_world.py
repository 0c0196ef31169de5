import dataclasses
import math

import numpy as np
import pytest

from taxsim import SimulationConfig, init_world, run
from taxsim.calibration import CalibrationError
from taxsim.econ import EnforcementPolicy, PublicGoodsFunction, PublicGoodsMode
from taxsim.llm import BackendSpec
from taxsim.world import (
    CONSERVATION_RTOL,
    AgentTraits,
    ConfigError,
    ConservationError,
    first_evasion_time,
    informal_share,
)

CALM = AgentTraits(0.0, 30, 0.99)


def small(**kw):
    base = dict(population=5, steps=365, seed=1, traits=CALM,
                decision_backend=BackendSpec.scripted("full_pay"))
    base.update(kw)
    return SimulationConfig(**base)


class TestValidation:
    @pytest.mark.parametrize("kw", [
        {"population": 0}, {"population": 1001}, {"steps": 100}, {"steps": 8000},
        {"step_days": 2}, {"initial_budget_fraction": 0.5}, {"welfare_discount": 0.0},
        {"traits": AgentTraits(1.5, 30, 0.9)}, {"traits": AgentTraits(0.5, 0, 0.9)},
        {"traits": AgentTraits(0.5, 30, 0.5)}, {"spend_share": 0.0},
    ])
    def test_rejects(self, kw, cal):
        with pytest.raises(ConfigError):
            init_world(small(**kw), cal)

    def test_unknown_persona(self, cal):
        with pytest.raises(CalibrationError):
            init_world(small(persona_id="nobody"), cal)

    def test_missing_calibration(self):
        with pytest.raises(CalibrationError):
            init_world(small(), None)


class TestInit:
    def test_deciles_stratified(self, cal):
        w = init_world(small(population=30), cal)
        counts = np.bincount([a.decile for a in w.agents], minlength=11)[1:]
        assert counts.tolist() == [3] * 10

    def test_budget_fraction(self, cal):
        w = init_world(small(population=10), cal)
        annual = np.mean([a.salary for a in w.agents]) * 12 * 10
        assert 0.05 * annual - 1 <= w.government.budget <= 0.15 * annual + 1

    def test_monthly_income_tax(self, cal):
        from taxsim.econ import compute_income_tax
        w = init_world(small(population=10), cal)
        for a in w.agents:
            annual = cal.income_deciles[a.decile - 1]
            assert w.monthly_income_tax(a) == pytest.approx(compute_income_tax(annual, cal.tax_schedule) / 12, abs=0.01)


class TestRun:
    def test_deterministic(self, cal):
        cfg = small(decision_backend=BackendSpec.scripted("law_breaking"), traits=None)
        assert run(cfg, cal).snapshot_json() == run(cfg, cal).snapshot_json()

    def test_seed_matters(self, cal):
        a = run(small(seed=1, traits=None, decision_backend=BackendSpec.scripted("law_breaking")), cal)
        b = run(small(seed=2, traits=None, decision_backend=BackendSpec.scripted("law_breaking")), cal)
        assert a.snapshot_json() != b.snapshot_json()

    def test_conservation_holds(self, cal):
        res = run(small(population=20, traits=None, decision_backend=BackendSpec.scripted("never_pay"),
                        enforcement=EnforcementPolicy(0.5, 0.75, 100_000, 30)), cal)
        assert res.metrics.max_conservation_error <= CONSERVATION_RTOL
        assert res.metrics.penalties > 0

    def test_conservation_violation_detected(self, cal, monkeypatch):
        import taxsim.world as world_mod

        w = init_world(small(), cal)
        real = world_mod.suggest

        def leaky(backend, ctx):
            w.agents[ctx.agent_id].balance += 1000.0  # money from nowhere
            return real(backend, ctx)

        monkeypatch.setattr(world_mod, "suggest", leaky)
        with pytest.raises(ConservationError):
            w.step()

    def test_full_payment_has_no_informal_economy(self, cal):
        cfg = small(public_goods=PublicGoodsFunction.linear(1.0),
                    enforcement=EnforcementPolicy(1.0, 1.0, 0.0, 1))
        res = run(cfg, cal)
        assert informal_share(res.metrics) < 0.05
        assert res.metrics.welfare > 0

    def test_metric_ranges(self, cal):
        res = run(small(population=10, traits=None, decision_backend=BackendSpec.scripted("half_pay")), cal)
        m = res.metrics
        assert 0.0 <= m.informal_share <= 1.0
        assert all(0.0 <= a.informal_share <= 1.0 for a in m.per_agent)
        assert first_evasion_time(m) == m.delta
        assert m.delta is None or 0 <= m.delta < 365
        assert len(m.informal_size_series) == 365
        assert list(m.informal_size_series) == sorted(m.informal_size_series)

    def test_audit_counts_are_binomial(self, cal):
        p, n = 0.25, 40
        cfg = small(population=n, enforcement=EnforcementPolicy(p, 0.75, 100_000, 30))
        res = run(cfg, cal)
        draws = n * len(range(0, 365, 30))
        mean = draws * p
        sd = math.sqrt(draws * p * (1 - p))
        assert abs(res.metrics.audits - mean) < 4 * sd

    def test_no_audits_when_probability_zero(self, cal):
        res = run(small(enforcement=EnforcementPolicy(0.0, 0.75, 100_000, 30)), cal)
        assert res.metrics.audits == 0 and res.metrics.penalties == 0

    def test_pooled_and_individual_goods_share_total_utility(self, cal):
        kw = dict(population=6, decision_backend=BackendSpec.scripted("full_pay"),
                  enforcement=EnforcementPolicy(1.0, 1.0, 0.0, 1))
        ind = run(small(public_goods=PublicGoodsFunction.linear(1.0), **kw), cal)
        pool = run(small(public_goods=PublicGoodsFunction.linear(1.0, PublicGoodsMode.POOLED), **kw), cal)
        u_ind = sum(a.ledger.utility_cum for a in ind.world.agents)
        u_pool = sum(a.ledger.utility_cum for a in pool.world.agents)
        assert u_pool == pytest.approx(u_ind, rel=0.05)

    def test_series_csv_and_snapshot(self, cal):
        res = run(small(population=2), cal)
        lines = res.series_csv().splitlines()
        assert lines[0] == "step,O,informal_share_so_far,government_budget,audits,penalties"
        assert len(lines) == 366
        assert '"conventions"' in res.snapshot_json()


def test_config_echo_is_plain(cal):
    echo = small().echo()
    assert echo["decision_backend"]["profile"] == "full_pay"
    assert dataclasses.replace(small(), seed=9).echo()["seed"] == 9
