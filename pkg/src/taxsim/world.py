"""Discrete-time economy: agents, government, transactions, audits, metrics.

One :class:`World` is one deterministic run. Each step pays salaries, executes
scheduled purchases, runs audits on audit days and credits public-goods
utility, in that order. Every tax report goes through the agent's decision
pipeline: a suggestion backend followed by the agent's own DQN.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Optional

import numpy as np

from taxsim.calibration import CalibrationData, CalibrationError
from taxsim.dqn import EVASION_TOLERANCE, DqnConfig, DqnPolicy, decide_and_learn
from taxsim.econ import (
    EnforcementPolicy,
    IncomeTaxSchedule,
    PublicGoodsFunction,
    PublicGoodsMode,
    SalesTaxRate,
    compute_income_tax,
    compute_penalty,
    compute_sales_tax,
    public_goods_value,
    to_cents,
)
from taxsim.llm import (
    Backend,
    BackendSpec,
    DecisionContext,
    DecisionKind,
    Policies,
    open_backend,
    suggest,
)

CONSERVATION_RTOL = 1e-6


class ConfigError(ValueError):
    pass


class ConservationError(AssertionError):
    """Money appeared or vanished during a step."""


class TxKind(str, Enum):
    INCOME = "income"
    PURCHASE = "purchase"
    TAX_PAYMENT = "tax_payment"
    PENALTY = "penalty"
    PUBLIC_GOOD_UTILITY = "public_good_utility"


@dataclass(frozen=True)
class TransactionRecord:
    step: int
    kind: TxKind
    amount: float
    tax_owed: float = 0.0
    tax_paid: float = 0.0
    text_form: str = ""


@dataclass
class AgentLedger:
    history: list[TransactionRecord] = field(default_factory=list)
    taxes_owed_cum: float = 0.0
    taxes_paid_cum: float = 0.0
    waived_cum: float = 0.0
    first_evasion_step: Optional[int] = None
    first_suggested_evasion_step: Optional[int] = None
    informal_value: float = 0.0
    total_value: float = 0.0
    utility_cum: float = 0.0
    penalties_cum: float = 0.0

    @property
    def evasion_gap(self) -> float:
        """Unpaid taxes not yet revealed by an audit."""
        return self.taxes_owed_cum - self.taxes_paid_cum - self.waived_cum


@dataclass(frozen=True)
class Desire:
    good_id: int
    quantity: int
    day: int


@dataclass
class AgentState:
    id: int
    balance: float
    salary_period: int
    salary: float
    desires: list[Desire]
    risk: float
    horizon: int
    cognition: float
    persona: tuple[str, ...]
    decile: int
    ledger: AgentLedger = field(default_factory=AgentLedger)


@dataclass
class GovernmentState:
    budget: float
    sales_tax: SalesTaxRate
    income_tax: IncomeTaxSchedule
    public_goods: PublicGoodsFunction
    enforcement: EnforcementPolicy
    waived_back_taxes_cum: float = 0.0
    budget_violation: bool = False

    @property
    def policies(self) -> Policies:
        return Policies(self.sales_tax, self.income_tax, self.public_goods, self.enforcement)


@dataclass(frozen=True)
class AgentTraits:
    """Fixed behavioural traits; ``None`` in a config means sample per agent."""

    risk: float
    horizon: int
    cognition: float


@dataclass(frozen=True)
class SimulationConfig:
    population: int = 100
    steps: int = 365
    step_days: int = 1
    seed: int = 0
    initial_budget_fraction: Optional[float] = None
    welfare_discount: float = 1e-4
    decision_backend: BackendSpec = field(default_factory=BackendSpec)
    public_goods: PublicGoodsFunction = field(default_factory=PublicGoodsFunction)
    enforcement: Optional[EnforcementPolicy] = None
    salary_period: int = 30
    goods_per_month: int = 10
    spend_share: float = 0.8
    initial_balance_months: float = 1.0
    traits: Optional[AgentTraits] = None
    persona_id: Optional[str] = None
    persona_extra: tuple[str, ...] = ()
    persona_window: int = 20
    dqn: DqnConfig = field(default_factory=DqnConfig)
    check_conservation: bool = True

    def validate(self) -> None:
        if not 1 <= self.population <= 1000:
            raise ConfigError("population must be in [1, 1000]")
        if not 365 <= self.steps <= 7300:
            raise ConfigError("steps must be in [365, 7300]")
        if self.step_days != 1:
            raise ConfigError("step_days is fixed at 1")
        if self.initial_budget_fraction is not None and not 0.05 <= self.initial_budget_fraction <= 0.15:
            raise ConfigError("initial budget fraction must be in [0.05, 0.15]")
        if not 0.0 < self.welfare_discount < 1.0:
            raise ConfigError("welfare discount must be in (0, 1)")
        if self.salary_period < 1:
            raise ConfigError("salary period must be >= 1")
        if self.traits is not None:
            t = self.traits
            if not 0.0 <= t.risk <= 1.0 or not 1 <= t.horizon <= 1095 or not 0.80 <= t.cognition <= 0.99:
                raise ConfigError("traits outside their ranges")
        if not 0.0 < self.spend_share <= 1.0:
            raise ConfigError("spend share must be in (0, 1]")

    def echo(self) -> dict[str, Any]:
        return to_jsonable(asdict(self))


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class StepEvents:
    step: int
    salaries: float = 0.0
    income_tax_owed: float = 0.0
    income_tax_paid: float = 0.0
    purchases: float = 0.0
    sales_tax_owed: float = 0.0
    sales_tax_paid: float = 0.0
    audits: int = 0
    penalties: float = 0.0
    waived: float = 0.0
    utility: float = 0.0
    informal_value: float = 0.0
    total_value: float = 0.0


@dataclass
class _Mind:
    backend: Backend
    policy: DqnPolicy
    rng: np.random.Generator
    history: deque
    outcomes: deque
    last_decision: Optional[tuple[int, float, float]] = None


def _stratified_deciles(n: int, rng: np.random.Generator) -> np.ndarray:
    base = np.repeat(np.arange(10), n // 10)
    extra = rng.choice(10, size=n % 10, replace=False)
    d = np.concatenate([base, extra])
    rng.shuffle(d)
    return d


class World:
    """Mutable run state. Build with :func:`init_world`."""

    def __init__(self, config: SimulationConfig, calibration: CalibrationData):
        self.config = config
        self.calibration = calibration
        self.t = 0
        self.goods = {g.id: g for g in calibration.goods_catalog}
        self.agents: list[AgentState] = []
        self.minds: list[_Mind] = []
        self.government: GovernmentState
        self.audit_rng: np.random.Generator
        self.sink = 0.0
        self.last_audit_step = 0
        self.series: list[dict[str, float]] = []
        self.informal_cum = 0.0
        self.total_cum = 0.0
        self.audits_cum = 0
        self.penalties_cum = 0.0
        self.welfare = 0.0
        self.negative_balance = False
        self.max_conservation_error = 0.0
        self.income_owed = 0.0  # per-agent cache filled at init
        self._monthly_tax: list[float] = []
        self._schedule: dict[int, list[tuple[int, Desire]]] = {}

    # -- helpers -----------------------------------------------------------

    def monthly_income_tax(self, agent: AgentState) -> float:
        return self._monthly_tax[agent.id]

    def _context(self, agent: AgentState, mind: _Mind, kind: DecisionKind, owed: float) -> DecisionContext:
        led = agent.ledger
        if mind.last_decision is not None:
            step, paid, owed_prev = mind.last_decision
            p = mind.policy.pending
            if p is not None:
                r = p.utility - p.penalty - p.cost
                mind.outcomes.append(
                    f"At time {step} I paid {paid:.2f} of {owed_prev:.2f} owed; outcome {r:+.2f}"
                )
        return DecisionContext(
            agent_id=agent.id,
            step=self.t,
            decision_kind=kind,
            owed_amount=owed,
            balance=agent.balance,
            salary=agent.salary,
            salary_period=agent.salary_period,
            risk=agent.risk,
            horizon=agent.horizon,
            cognition=agent.cognition,
            policies=self.government.policies,
            persona=agent.persona,
            history=tuple(reversed(mind.history)),
            outcomes=tuple(reversed(mind.outcomes)),
            evasion_gap=led.evasion_gap,
            steps_since_audit=self.t - self.last_audit_step,
            annual_tax_estimate=self._monthly_tax[agent.id] * 12.0,
            persona_window=self.config.persona_window,
        )

    def _decide(self, agent: AgentState, kind: DecisionKind, owed: float) -> float:
        mind = self.minds[agent.id]
        ctx = self._context(agent, mind, kind, owed)
        s = suggest(mind.backend, ctx)
        led = agent.ledger
        if led.first_suggested_evasion_step is None and s.amount < owed - EVASION_TOLERANCE:
            led.first_suggested_evasion_step = self.t
        paid = decide_and_learn(mind.policy, ctx, s, mind.rng)
        paid = min(max(paid, 0.0), owed)
        mind.policy.observe(cost=paid)
        mind.last_decision = (self.t, paid, owed)
        return paid

    def _post_tax(self, agent: AgentState, ev: StepEvents, value: float, owed: float, paid: float) -> None:
        led = agent.ledger
        led.taxes_owed_cum += owed
        led.taxes_paid_cum += paid
        if led.first_evasion_step is None and led.evasion_gap > EVASION_TOLERANCE:
            led.first_evasion_step = self.t
        denom = value + owed
        unreported = (owed - paid) / owed * denom if owed > 0 else 0.0
        led.informal_value += unreported
        led.total_value += denom
        ev.informal_value += unreported
        ev.total_value += denom

    # -- the step ----------------------------------------------------------

    def step(self) -> StepEvents:
        cfg = self.config
        gov = self.government
        t = self.t
        ev = StepEvents(step=t)
        budget0 = gov.budget
        bal0 = sum(a.balance for a in self.agents)
        sink0 = self.sink
        paid_now = [0.0] * len(self.agents)

        # 1. salaries and income tax
        for agent in self.agents:
            if t % agent.salary_period != 0:
                continue
            mind = self.minds[agent.id]
            s = agent.salary
            agent.balance += s
            ev.salaries += s
            owed = self._monthly_tax[agent.id]
            paid = self._decide(agent, DecisionKind.INCOME_TAX, owed) if owed > 0 else 0.0
            agent.balance -= paid
            gov.budget += paid
            ev.income_tax_owed += owed
            ev.income_tax_paid += paid
            paid_now[agent.id] += paid
            text = f"Obtained an income {s:.2f} at time {t}; reported {paid:.2f} of {owed:.2f} income tax"
            agent.ledger.history.append(TransactionRecord(t, TxKind.INCOME, s, owed, paid, text))
            mind.history.append(text)
            self._post_tax(agent, ev, s, owed, paid)

        # 2. scheduled purchases
        for agent_id, desire in self._schedule.get(t % cfg.salary_period, ()):
            agent = self.agents[agent_id]
            mind = self.minds[agent_id]
            good = self.goods[desire.good_id]
            value = to_cents(good.price * desire.quantity)
            owed = to_cents(compute_sales_tax(value, gov.sales_tax))
            paid = self._decide(agent, DecisionKind.SALES_TAX, owed) if owed > 0 else 0.0
            agent.balance -= value + paid
            self.sink += value
            gov.budget += paid
            ev.purchases += value
            ev.sales_tax_owed += owed
            ev.sales_tax_paid += paid
            paid_now[agent_id] += paid
            text = f"buy a product for a price {value:.2f} at time {t}; reported {paid:.2f} of {owed:.2f} sales tax"
            agent.ledger.history.append(TransactionRecord(t, TxKind.PURCHASE, value, owed, paid, text))
            mind.history.append(text)
            self._post_tax(agent, ev, value, owed, paid)

        # 3. audits
        enf = gov.enforcement
        if t % enf.audit_period == 0:
            self.last_audit_step = t
            if enf.audit_probability > 0:
                draws = self.audit_rng.random(len(self.agents))
                for agent, u in zip(self.agents, draws):
                    if u >= enf.audit_probability:
                        continue
                    ev.audits += 1
                    led = agent.ledger
                    gap = to_cents(max(led.evasion_gap, 0.0))
                    penalty = to_cents(compute_penalty(gap, enf)) if gap > 0 else 0.0
                    led.waived_cum += led.evasion_gap
                    self.minds[agent.id].policy.audit(penalty)
                    if penalty > 0:
                        agent.balance -= penalty
                        gov.budget += penalty
                        gov.waived_back_taxes_cum += gap
                        led.penalties_cum += penalty
                        ev.penalties += penalty
                        ev.waived += gap
                        led.history.append(TransactionRecord(
                            t, TxKind.PENALTY, penalty, 0.0, 0.0,
                            f"Audited at time {t}: fined {penalty:.2f} for {gap:.2f} unpaid taxes",
                        ))

        # 4. public goods
        pg = gov.public_goods
        n = len(self.agents)
        if pg.mode is PublicGoodsMode.POOLED:
            pooled = public_goods_value(pg, sum(paid_now)) / n
            utils = [pooled] * n
        else:
            utils = [public_goods_value(pg, p) for p in paid_now]
        disc = (1.0 + cfg.welfare_discount) ** t
        for agent, u in zip(self.agents, utils):
            if u == 0.0:
                continue
            agent.ledger.utility_cum += u
            self.minds[agent.id].policy.observe(utility=u)
            ev.utility += u
        self.welfare += ev.utility / disc

        # 5. bookkeeping
        self.informal_cum += ev.informal_value
        self.total_cum += ev.total_value
        self.audits_cum += ev.audits
        self.penalties_cum += ev.penalties
        if gov.budget < 0:
            gov.budget_violation = True
        bal1 = sum(a.balance for a in self.agents)
        if any(a.balance < 0 for a in self.agents):
            self.negative_balance = True
        if cfg.check_conservation:
            flows = (bal1 - bal0) + (gov.budget - budget0) + (self.sink - sink0) - ev.salaries
            scale = max(1.0, ev.salaries + ev.purchases + ev.penalties + abs(bal1) + abs(gov.budget))
            err = abs(flows) / scale
            self.max_conservation_error = max(self.max_conservation_error, err)
            if err > CONSERVATION_RTOL:
                raise ConservationError(f"step {t}: money flows off by {flows:.6g}")
        self.series.append({
            "step": t,
            "O": self.informal_cum,
            "informal_share_so_far": self.informal_cum / self.total_cum if self.total_cum > 0 else 0.0,
            "government_budget": gov.budget,
            "audits": ev.audits,
            "penalties": ev.penalties,
        })
        self.t += 1
        return ev


def _sample_traits(rng: np.random.Generator) -> AgentTraits:
    return AgentTraits(
        risk=float(rng.uniform(0.0, 1.0)),
        horizon=int(rng.integers(1, 1096)),
        cognition=float(rng.uniform(0.80, 0.99)),
    )


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**32], dtype=np.uint64))


def init_world(config: SimulationConfig, calibration: CalibrationData) -> World:
    config.validate()
    if calibration is None:
        raise CalibrationError("calibration data is required")
    if config.persona_id is not None and config.persona_id not in calibration.persona_corpus:
        raise CalibrationError(f"persona corpus has no {config.persona_id!r}")
    root = np.random.SeedSequence(config.seed)
    init_ss, audit_ss, agents_ss = root.spawn(3)
    rng = np.random.default_rng(init_ss)
    w = World(config, calibration)
    w.audit_rng = np.random.default_rng(audit_ss)
    sched = calibration.tax_schedule
    enf = config.enforcement or calibration.enforcement_defaults
    deciles = _stratified_deciles(config.population, rng)
    goods = calibration.goods_catalog
    weights = np.array([g.weight for g in goods])
    n_goods = min(config.goods_per_month, len(goods), config.salary_period - 1)
    persona = tuple(calibration.persona_corpus.get(config.persona_id, ())) + tuple(config.persona_extra)
    schedule: dict[int, list[tuple[int, Desire]]] = {}
    salaries = []
    for i, ss in enumerate(agents_ss.spawn(config.population)):
        dec = int(deciles[i])
        monthly = calibration.income_deciles[dec] / 12.0
        salaries.append(monthly)
        monthly_tax = to_cents(compute_income_tax(monthly * 12.0, sched) / 12.0)
        w._monthly_tax.append(monthly_tax)
        traits = config.traits or _sample_traits(rng)
        desires: list[Desire] = []
        if n_goods > 0:
            chosen = rng.choice(len(goods), size=n_goods, replace=False, p=weights)
            days = rng.choice(np.arange(1, config.salary_period), size=n_goods, replace=False)
            budget = config.spend_share * (monthly - monthly_tax)
            wsum = weights[chosen].sum()
            for gi, day in zip(chosen, days):
                g = goods[int(gi)]
                spend = budget * g.weight / wsum
                qty = max(1, int(round(spend / g.price)))
                d = Desire(g.id, qty, int(day))
                desires.append(d)
                schedule.setdefault(int(day), []).append((i, d))
        agent = AgentState(
            id=i,
            balance=to_cents(config.initial_balance_months * monthly),
            salary_period=config.salary_period,
            salary=to_cents(monthly),
            desires=desires,
            risk=traits.risk,
            horizon=traits.horizon,
            cognition=traits.cognition,
            persona=persona,
            decile=dec + 1,
        )
        w.agents.append(agent)
        pol_ss, be_ss, dec_ss = ss.spawn(3)
        policy = DqnPolicy(config.dqn, risk=traits.risk, horizon=traits.horizon,
                           cognition=traits.cognition, seed=_int_seed(pol_ss))
        w.minds.append(_Mind(
            backend=open_backend(config.decision_backend, _int_seed(be_ss)),
            policy=policy,
            rng=np.random.default_rng(dec_ss),
            history=deque(maxlen=20),
            outcomes=deque(maxlen=20),
        ))
    for day in schedule:
        schedule[day].sort(key=lambda x: (x[0], x[1].good_id))
    w._schedule = schedule
    frac = config.initial_budget_fraction
    if frac is None:
        frac = float(rng.uniform(0.05, 0.15))
    mean_annual = float(np.mean(salaries)) * 12.0
    w.government = GovernmentState(
        budget=to_cents(frac * config.population * mean_annual),
        sales_tax=calibration.sales_rate,
        income_tax=sched,
        public_goods=config.public_goods,
        enforcement=enf,
    )
    return w


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class AgentMetrics:
    agent_id: int
    delta: Optional[int]
    informal_share: float
    decile: int
    suggested_delta: Optional[int] = None


@dataclass(frozen=True)
class RunMetrics:
    delta: Optional[int]
    informal_size_series: tuple[float, ...]
    informal_share: float
    welfare: float
    per_agent: tuple[AgentMetrics, ...]
    audits: int = 0
    penalties: float = 0.0
    waived_back_taxes: float = 0.0
    negative_balance: bool = False
    budget_violation: bool = False
    max_conservation_error: float = 0.0


def first_evasion_time(metrics: RunMetrics) -> Optional[int]:
    """Earliest step at which any agent underpaid by more than a cent."""
    steps = [a.delta for a in metrics.per_agent if a.delta is not None]
    return min(steps) if steps else None


def informal_share(metrics: RunMetrics) -> float:
    return metrics.informal_share


def _share(informal: float, total: float) -> float:
    return informal / total if total > 0 else 0.0


def collect_metrics(world: World) -> RunMetrics:
    per_agent = tuple(
        AgentMetrics(
            a.id,
            a.ledger.first_evasion_step,
            min(1.0, max(0.0, _share(a.ledger.informal_value, a.ledger.total_value))),
            a.decile,
            a.ledger.first_suggested_evasion_step,
        )
        for a in world.agents
    )
    deltas = [a.delta for a in per_agent if a.delta is not None]
    return RunMetrics(
        delta=min(deltas) if deltas else None,
        informal_size_series=tuple(r["O"] for r in world.series),
        informal_share=min(1.0, max(0.0, _share(world.informal_cum, world.total_cum))),
        welfare=world.welfare,
        per_agent=per_agent,
        audits=world.audits_cum,
        penalties=world.penalties_cum,
        waived_back_taxes=world.government.waived_back_taxes_cum,
        negative_balance=world.negative_balance,
        budget_violation=world.government.budget_violation,
        max_conservation_error=world.max_conservation_error,
    )


SERIES_COLUMNS = ("step", "O", "informal_share_so_far", "government_budget", "audits", "penalties")


@dataclass
class RunResult:
    config: SimulationConfig
    metrics: RunMetrics
    world: World

    def series_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for row in self.world.series:
            w.writerow([_fmt(row[c]) for c in SERIES_COLUMNS])
        return buf.getvalue()

    def snapshot(self) -> dict[str, Any]:
        m = self.metrics
        return {
            "config": self.config.echo(),
            "conventions": {
                "salary_paid_when": "step % salary_period == 0, including step 0",
                "audit_when": "step % audit_period == 0, after that step's decisions",
            },
            "metrics": {
                "delta": m.delta,
                "informal_share": m.informal_share,
                "welfare": m.welfare,
                "audits": m.audits,
                "penalties": m.penalties,
                "waived_back_taxes": m.waived_back_taxes,
                "negative_balance": m.negative_balance,
                "budget_violation": m.budget_violation,
                "per_agent": [asdict(a) for a in m.per_agent],
            },
            "government": {
                "budget": self.world.government.budget,
                "waived_back_taxes_cum": self.world.government.waived_back_taxes_cum,
            },
            "agents": [
                {
                    "id": a.id,
                    "decile": a.decile,
                    "balance": a.balance,
                    "salary": a.salary,
                    "traits": {"risk": a.risk, "horizon": a.horizon, "cognition": a.cognition},
                    "ledger": {
                        "taxes_owed_cum": a.ledger.taxes_owed_cum,
                        "taxes_paid_cum": a.ledger.taxes_paid_cum,
                        "evasion_gap": a.ledger.evasion_gap,
                        "first_evasion_step": a.ledger.first_evasion_step,
                        "history": [
                            {**asdict(r), "kind": r.kind.value} for r in a.ledger.history
                        ],
                    },
                }
                for a in self.world.agents
            ],
            "series": self.world.series,
        }

    def snapshot_json(self) -> str:
        return json.dumps(to_jsonable(self.snapshot()), indent=1, sort_keys=True)


def _fmt(v: float) -> str:
    if isinstance(v, int):
        return str(v)
    return repr(round(float(v), 6))


def run(config: SimulationConfig, calibration: CalibrationData) -> RunResult:
    world = init_world(config, calibration)
    for _ in range(config.steps):
        world.step()
    for mind in world.minds:
        mind.policy.finish(mind.rng)
    return RunResult(config, collect_metrics(world), world)
