"""Experiment battery: validation configs, personas, dose-response, deciles, sweeps.

Every experiment is a list of cells, each repeated ``repetitions`` times. A
run's seed depends only on ``(master_seed, kind, cell_index, repetition)``,
so any cell can be re-run on its own. By default cells share common random
numbers: the cell index in that key is held at 0, so repetition ``r`` of every
cell draws the same population, exploration stream and audit uniforms, and
differences between cells come from the treatment rather than the draw. Results are kept in long format
(experiment, cell, repetition, metric, value); the summary is a pure function
of those rows, which is what lets ``report`` rebuild it byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from taxsim.calibration import CalibrationData
from taxsim.econ import (
    EnforcementPolicy,
    PublicGoodsFunction,
    PublicGoodsKind,
    PublicGoodsMode,
    compute_income_tax,
)
from taxsim.llm import (
    ONSET_HORIZON,
    SYNTHETIC_EVASION_LINE,
    BackendSpec,
    DecisionContext,
    DecisionKind,
    Policies,
    Profile,
    ScriptedPersona,
)
from taxsim.stats import aggregate, mann_whitney_u, spearman_rho
from taxsim.world import AgentTraits, SimulationConfig, run

KINDS = ("validation", "persona", "dose_response", "decile", "sweep", "run")

# config id -> (linear public-goods slope, audit probability)
VALIDATION_CONFIGS = {"I": (2.0, 0.0), "II": (1.0, 1.0), "III": (1.0, 0.0), "IV": (0.0, 1.0)}
VALIDATION_EXPECTED = {"I": (0.0,), "II": (0.0,), "III": (0.0, 0.5, 1.0), "IV": (0.0, 0.5, 1.0)}
VALIDATION_BACKENDS = {"I": "full_pay", "II": "full_pay", "III": "risk_sensitive", "IV": "risk_sensitive"}
CALM_TRAITS = AgentTraits(risk=0.0, horizon=30, cognition=0.99)

DECILE_VARIANTS = ("linear_0.75", "linear_1.25", "capitalist_log", "socialist")
PERSONA_PROFILES = ("law_abiding", "random", "law_breaking")
DESK_AUDIT_PERIOD = 30
DELTA_BIN = 50


class ExperimentError(ValueError):
    pass


def derive_seed(master: int, kind: str, cell: int, repetition: int) -> int:
    """64-bit run seed: BLAKE2b of ``master:kind:cell:repetition``."""
    key = f"{master}:{kind}:{cell}:{repetition}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


# ---------------------------------------------------------------------------
# specs and cells


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    repetitions: int
    base: SimulationConfig
    params: Mapping[str, Any] = field(default_factory=dict)
    master_seed: int = 0
    workers: int = 1
    common_random_numbers: bool = True

    def seed_for(self, cell_index: int, repetition: int) -> int:
        cell = 0 if self.common_random_numbers else cell_index
        return derive_seed(self.master_seed, self.kind, cell, repetition)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ExperimentError(f"unknown experiment kind {self.kind!r}")
        if self.repetitions < 1:
            raise ExperimentError("repetitions must be >= 1")
        if self.workers < 1:
            raise ExperimentError("workers must be >= 1")
        p = self.params
        if self.kind == "validation":
            for cid in p.get("configs", ()):
                if cid not in VALIDATION_CONFIGS:
                    raise ExperimentError(f"unknown validation config {cid!r}; use I, II, III or IV")
        if self.kind == "persona":
            for prof in p.get("profiles", ()):
                if prof not in PERSONA_PROFILES:
                    raise ExperimentError(f"unknown persona profile {prof!r}")
        if self.kind == "decile":
            for v in p.get("variants", ()):
                if v not in DECILE_VARIANTS:
                    raise ExperimentError(f"unknown public-goods variant {v!r}")
        for name in ("k_values", "nu_grid", "p_grid", "configs", "profiles", "variants"):
            if name in p:
                grid = list(p[name])
                if not grid:
                    raise ExperimentError(f"{name} must be non-empty")
                if name in ("k_values", "nu_grid", "p_grid") and grid != sorted(grid):
                    raise ExperimentError(f"{name} must be sorted ascending")
        if self.kind == "sweep":
            if any(not 0.0 <= x <= 1.0 for x in p.get("p_grid", ())):
                raise ExperimentError("p_grid values must lie in [0, 1]")
            if any(x < 0 for x in p.get("nu_grid", ())):
                raise ExperimentError("nu_grid values must be >= 0")


@dataclass(frozen=True)
class Cell:
    label: str
    config: SimulationConfig
    trial: bool = False  # single-decision persona trial instead of a full run


def parse_cell(label: str) -> dict[str, str]:
    out = {}
    for part in label.split(";"):
        k, _, v = part.partition("=")
        out[k] = v
    return out


def _fmt_num(x: float) -> str:
    return f"{x:g}"


def _with_backend(base: SimulationConfig, spec: BackendSpec) -> SimulationConfig:
    return replace(base, decision_backend=spec)


def _socialist_tau_star(cal: CalibrationData) -> float:
    """Log of the top decile's annual tax if the whole net income is spent."""
    top = cal.income_deciles[-1]
    income_tax = compute_income_tax(top, cal.tax_schedule)
    return math.log(income_tax + cal.sales_rate.rate * (top - income_tax))


def public_goods_variant(name: str, cal: CalibrationData, mode: PublicGoodsMode) -> PublicGoodsFunction:
    if name.startswith("linear_"):
        return PublicGoodsFunction(PublicGoodsKind.LINEAR, k=float(name.split("_", 1)[1]), mode=mode)
    if name == "capitalist_log":
        return PublicGoodsFunction(PublicGoodsKind.CAPITALIST_LOG, mode=mode)
    if name == "socialist":
        return PublicGoodsFunction(PublicGoodsKind.SOCIALIST, tau_star=_socialist_tau_star(cal), mode=mode)
    raise ExperimentError(f"unknown public-goods variant {name!r}")


def build_cells(spec: ExperimentSpec, cal: CalibrationData) -> list[Cell]:
    spec.validate()
    base = spec.base
    p = spec.params
    explicit_backend = p.get("backend_override")
    cells: list[Cell] = []
    if spec.kind == "validation":
        for cid in p.get("configs", tuple(VALIDATION_CONFIGS)):
            k, prob = VALIDATION_CONFIGS[cid]
            be = explicit_backend or BackendSpec.scripted(VALIDATION_BACKENDS[cid])
            cfg = replace(
                base,
                public_goods=PublicGoodsFunction.linear(k, PublicGoodsMode.INDIVIDUAL),
                enforcement=EnforcementPolicy(prob, 1.0, 0.0, 1),
                decision_backend=be,
            )
            cells.append(Cell(f"config={cid}", cfg))
    elif spec.kind == "persona":
        for prof in p.get("profiles", PERSONA_PROFILES):
            be = explicit_backend or BackendSpec.scripted(prof)
            cfg = replace(base, persona_id=prof if prof in cal.persona_corpus else base.persona_id,
                          decision_backend=be)
            cells.append(Cell(f"profile={prof};mode=run", cfg))
            if int(p.get("trials", 0)) > 0 and be.kind == "scripted_persona":
                cells.append(Cell(f"profile={prof};mode=trial", cfg, trial=True))
    elif spec.kind == "dose_response":
        for k in p.get("k_values", range(21)):
            k = int(k)
            be = explicit_backend or BackendSpec.scripted(Profile.DOSE_RESPONSE, dose_k=k)
            cfg = replace(base, persona_extra=(SYNTHETIC_EVASION_LINE,) * k, decision_backend=be)
            cells.append(Cell(f"k={k}", cfg))
    elif spec.kind == "decile":
        for v in p.get("variants", DECILE_VARIANTS):
            cfg = replace(base, public_goods=public_goods_variant(v, cal, base.public_goods.mode))
            if explicit_backend:
                cfg = _with_backend(cfg, explicit_backend)
            cells.append(Cell(f"variant={v}", cfg))
    elif spec.kind == "sweep":
        enf = base.enforcement or cal.enforcement_defaults
        for nu in p.get("nu_grid", ()):
            for prob in p.get("p_grid", ()):
                cfg = replace(
                    base,
                    public_goods=PublicGoodsFunction.linear(float(nu), base.public_goods.mode),
                    enforcement=replace(enf, audit_probability=float(prob)),
                )
                if explicit_backend:
                    cfg = _with_backend(cfg, explicit_backend)
                cells.append(Cell(f"nu_ratio={_fmt_num(nu)};p={_fmt_num(prob)}", cfg))
        if not cells:
            raise ExperimentError("sweep needs non-empty nu_grid and p_grid")
    else:
        cfg = _with_backend(base, explicit_backend) if explicit_backend else base
        cells.append(Cell("run", cfg))
    return cells


def default_base(kind: str, **overrides: Any) -> SimulationConfig:
    """Desk-scale base configuration for each experiment kind."""
    if kind in ("validation", "persona", "dose_response"):
        base = SimulationConfig(
            population=1,
            steps=365,
            traits=CALM_TRAITS,
            public_goods=PublicGoodsFunction.linear(1.0, PublicGoodsMode.INDIVIDUAL),
            enforcement=EnforcementPolicy(0.0, 0.75, 100_000.0, 365),
            decision_backend=BackendSpec.scripted(Profile.FULL_PAY),
            persona_id="random" if kind == "dose_response" else None,
        )
    else:
        base = SimulationConfig(
            population=100,
            steps=365,
            public_goods=PublicGoodsFunction.linear(1.0, PublicGoodsMode.POOLED),
            enforcement=EnforcementPolicy(0.1, 0.75, 100_000.0, DESK_AUDIT_PERIOD),
            decision_backend=BackendSpec.scripted(Profile.RISK_SENSITIVE),
        )
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# running


def run_metrics(result, decile_breakdown: bool = False) -> dict[str, float]:
    """Per-run metrics; unset first-evasion times are censored at T."""
    T = result.config.steps
    m = result.metrics
    per = m.per_agent
    agent_delta = [a.delta if a.delta is not None else T for a in per]
    suggested = [a.suggested_delta for a in per if a.suggested_delta is not None]
    out = {
        "informal_share": m.informal_share,
        "delta": float(m.delta if m.delta is not None else T),
        "delta_censored": 0.0 if m.delta is not None else 1.0,
        "agent_delta_mean": float(np.mean(agent_delta)),
        "evaded": 0.0 if m.delta is None else 1.0,
        "suggested_evasion": 1.0 if suggested else 0.0,
        "suggested_delta": float(min(suggested) if suggested else T),
        "welfare": m.welfare,
        "audits": float(m.audits),
        "penalties": m.penalties,
    }
    if decile_breakdown:
        agents = result.world.agents
        for d in range(1, 11):
            group = [a for a in agents if a.decile == d]
            if not group:
                continue
            inf = sum(a.ledger.informal_value for a in group)
            tot = sum(a.ledger.total_value for a in group)
            ds = [a.ledger.first_evasion_step for a in group]
            out[f"decile_{d:02d}.informal_share"] = inf / tot if tot > 0 else 0.0
            out[f"decile_{d:02d}.delta"] = float(np.mean([x if x is not None else T for x in ds]))
            out[f"decile_{d:02d}.delta_censored_share"] = float(np.mean([x is None for x in ds]))
    return out


def persona_trial(config: SimulationConfig, cal: CalibrationData, seed: int) -> dict[str, float]:
    """Ask a fresh scripted session for one decision after every onset window.

    Evades when the suggestion falls short of the owed amount.
    """
    sched = cal.tax_schedule
    income = cal.income_deciles[4]
    owed = round(compute_income_tax(income, sched) / 12.0, 2)
    policies = Policies(cal.sales_rate, sched, config.public_goods,
                        config.enforcement or cal.enforcement_defaults)
    ctx = DecisionContext(
        agent_id=0, step=ONSET_HORIZON, decision_kind=DecisionKind.INCOME_TAX, owed_amount=owed,
        balance=income / 12.0, salary=income / 12.0, salary_period=config.salary_period,
        risk=0.0, horizon=30, cognition=0.99, policies=policies,
    )
    s = ScriptedPersona(config.decision_backend, seed).suggest(ctx)
    return {"suggested_evasion": 1.0 if s.amount < owed - 0.01 else 0.0}


@dataclass(frozen=True)
class _Task:
    cell_index: int
    label: str
    repetition: int
    seed: int
    config: SimulationConfig
    trial: bool
    decile: bool


def _execute(task: _Task, cal: CalibrationData) -> dict[str, float]:
    if task.trial:
        return persona_trial(task.config, cal, task.seed)
    cfg = replace(task.config, seed=task.seed)
    return run_metrics(run(cfg, cal), task.decile)


def _execute_packed(args) -> dict[str, float]:
    return _execute(*args)


@dataclass(frozen=True)
class RunRecord:
    cell_index: int
    cell: str
    repetition: int
    seed: int
    metrics: Mapping[str, float]


def plan_tasks(spec: ExperimentSpec, cal: CalibrationData) -> list[_Task]:
    tasks = []
    trials = int(spec.params.get("trials", 0))
    for ci, cell in enumerate(build_cells(spec, cal)):
        reps = trials if cell.trial else spec.repetitions
        for r in range(reps):
            tasks.append(_Task(ci, cell.label, r, spec.seed_for(ci, r),
                               cell.config, cell.trial, spec.kind == "decile"))
    return tasks


def execute(spec: ExperimentSpec, cal: CalibrationData,
            progress: Optional[Callable[[int, int], None]] = None) -> list[RunRecord]:
    tasks = plan_tasks(spec, cal)
    if spec.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_execute_packed, [(t, cal) for t in tasks], chunksize=1))
    else:
        results = []
        for i, t in enumerate(tasks):
            results.append(_execute(t, cal))
            if progress:
                progress(i + 1, len(tasks))
    records = [RunRecord(t.cell_index, t.label, t.repetition, t.seed, m) for t, m in zip(tasks, results)]
    records.sort(key=lambda r: (r.cell_index, r.repetition))
    return records


# ---------------------------------------------------------------------------
# long-format rows and the summary built from them

RESULT_COLUMNS = ("experiment", "cell", "repetition", "metric", "value")


def format_value(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def records_to_rows(experiment: str, records: Iterable[RunRecord]) -> list[tuple[str, str, int, str, float]]:
    rows = []
    for r in records:
        for metric, value in r.metrics.items():
            rows.append((experiment, r.cell, r.repetition, metric, float(value)))
    return rows


def rows_to_csv(rows: Sequence[tuple[str, str, int, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for exp, cell, rep, metric, value in rows:
        w.writerow([exp, cell, rep, metric, format_value(value)])
    return buf.getvalue()


def read_rows(text: str) -> list[tuple[str, str, int, str, float]]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
        raise ExperimentError(f"results file must have columns {', '.join(RESULT_COLUMNS)}")
    rows = []
    for rec in reader:
        try:
            rows.append((rec["experiment"], rec["cell"], int(rec["repetition"]), rec["metric"],
                         float(rec["value"])))
        except (TypeError, ValueError) as exc:
            raise ExperimentError(f"results line {reader.line_num}: {exc}") from None
    return rows


def _group(rows) -> tuple[str, dict[str, dict[str, dict[int, float]]]]:
    experiments = {r[0] for r in rows}
    if len(experiments) != 1:
        raise ExperimentError("results must hold exactly one experiment")
    cells: dict[str, dict[str, dict[int, float]]] = {}
    for _, cell, rep, metric, value in rows:
        cells.setdefault(cell, {}).setdefault(metric, {})[rep] = value
    return experiments.pop(), cells


def _values(cell: Mapping[str, Mapping[int, float]], metric: str) -> list[float]:
    series = cell.get(metric, {})
    return [series[k] for k in sorted(series)]


def summarize(rows: Sequence[tuple[str, str, int, str, float]]) -> dict[str, Any]:
    """Per-cell aggregates plus kind-specific derived views, from rows alone."""
    if not rows:
        raise ExperimentError("no result rows")
    experiment, cells = _group(rows)
    out_cells = []
    for label, metrics in cells.items():
        entry: dict[str, Any] = {"cell": label, "metrics": {}}
        for metric in metrics:
            entry["metrics"][metric] = aggregate(_values(metrics, metric)).as_dict()
        if "delta_censored" in metrics:
            cens = _values(metrics, "delta_censored")
            deltas = _values(metrics, "delta")
            observed = [d for d, c in zip(deltas, cens) if c == 0.0]
            entry["delta_censored_runs"] = int(sum(cens))
            entry["delta_uncensored"] = aggregate(observed).as_dict() if observed else None
        out_cells.append(entry)
    summary: dict[str, Any] = {"experiment": experiment, "cells": out_cells}
    derive = _DERIVED.get(experiment.split(":", 1)[0])
    if derive is not None:
        summary["derived"] = derive(cells)
    return summary


def _mean(cell, metric) -> float:
    v = _values(cell, metric)
    return float(math.fsum(v) / len(v)) if v else float("nan")


def _derive_validation(cells) -> dict[str, Any]:
    out = {}
    for label, m in cells.items():
        cid = parse_cell(label)["config"]
        o = _values(m, "informal_share")
        expected = VALIDATION_EXPECTED.get(cid, (0.0,))
        centre = 0.0 if len(expected) == 1 else 0.5
        test = mann_whitney_u(o, [centre] * len(o))
        dist = [min(abs(x - e) for e in expected) for x in o]
        out[cid] = {
            "expected": list(expected),
            "mean_informal_share": _mean(m, "informal_share"),
            "max_distance_to_expected": max(dist),
            "share_within_0.1_of_expected": sum(d <= 0.1 for d in dist) / len(dist),
            "mann_whitney_vs_expected": {
                "reference": centre, "u": test.u, "p": test.p, "method": test.method,
                "indistinguishable_at_0.05": test.p > 0.05,
            },
        }
    return out


def _histogram(values: Sequence[float], width: int) -> dict[str, int]:
    counts: dict[int, int] = {}
    for v in values:
        b = int(v // width)
        counts[b] = counts.get(b, 0) + 1
    return {f"[{b * width},{(b + 1) * width})": counts[b] for b in sorted(counts)}


def _derive_persona(cells) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for label, m in cells.items():
        info = parse_cell(label)
        prof = out.setdefault(info["profile"], {})
        if info.get("mode") == "trial":
            v = _values(m, "suggested_evasion")
            prof["trial_incidence"] = math.fsum(v) / len(v)
            prof["trials"] = len(v)
        else:
            cens = _values(m, "delta_censored")
            deltas = [d for d, c in zip(_values(m, "delta"), cens) if c == 0.0]
            sug = [d for d, e in zip(_values(m, "suggested_delta"), _values(m, "suggested_evasion")) if e]
            prof["run_incidence_final"] = _mean(m, "evaded")
            prof["run_incidence_suggested"] = _mean(m, "suggested_evasion")
            prof["runs"] = len(cens)
            prof["delta_histogram"] = _histogram(deltas, DELTA_BIN)
            prof["suggested_delta_histogram"] = _histogram(sug, DELTA_BIN)
            prof["delta_censored_runs"] = int(sum(cens))
    return out


def _derive_dose(cells) -> dict[str, Any]:
    ks, o, d, dstd = [], [], [], []
    for label, m in cells.items():
        ks.append(int(parse_cell(label)["k"]))
        o.append(_mean(m, "informal_share"))
        d.append(_mean(m, "delta"))
        dstd.append(aggregate(_values(m, "delta")).std)
    out: dict[str, Any] = {
        "k": ks, "mean_informal_share": o, "mean_delta": d, "std_delta": dstd,
    }
    if len(ks) >= 2:
        out["spearman_k_informal_share"] = spearman_rho(ks, o)
        out["spearman_k_delta"] = spearman_rho(ks, d)
        out["spearman_delta_informal_share"] = spearman_rho(d, o)
    return out


def _derive_decile(cells) -> dict[str, Any]:
    out = {}
    for label, m in cells.items():
        v = parse_cell(label)["variant"]
        per = {}
        for d in range(1, 11):
            key = f"decile_{d:02d}"
            if f"{key}.informal_share" not in m:
                continue
            per[f"{d:02d}"] = {
                "mean_informal_share": _mean(m, f"{key}.informal_share"),
                "std_informal_share": aggregate(_values(m, f"{key}.informal_share")).std,
                "mean_delta": _mean(m, f"{key}.delta"),
                "std_delta": aggregate(_values(m, f"{key}.delta")).std,
                "censored_share": _mean(m, f"{key}.delta_censored_share"),
            }
        out[v] = per
    return out


def heatmap_rows(cells) -> list[dict[str, float]]:
    rows = []
    for label, m in cells.items():
        info = parse_cell(label)
        o = aggregate(_values(m, "informal_share"))
        d = aggregate(_values(m, "agent_delta_mean"))
        rows.append({
            "nu_ratio": float(info["nu_ratio"]), "p": float(info["p"]),
            "mean_informal_share": o.mean, "std_informal_share": o.std,
            "mean_agent_delta": d.mean, "std_agent_delta": d.std, "n": o.n,
        })
    return rows


def _derive_sweep(cells) -> dict[str, Any]:
    hm = heatmap_rows(cells)
    rows: dict[float, list[tuple[float, float]]] = {}
    for r in hm:
        rows.setdefault(r["nu_ratio"], []).append((r["p"], r["mean_informal_share"]))
    monotone = {}
    for nu, pts in sorted(rows.items()):
        pts.sort()
        vals = [v for _, v in pts]
        monotone[_fmt_num(nu)] = {
            "non_increasing_in_p": all(b <= a for a, b in zip(vals, vals[1:])),
            "spearman_p_informal_share": spearman_rho([p for p, _ in pts], vals) if len(pts) > 1 else 0.0,
        }
    best = max(hm, key=lambda r: r["mean_informal_share"])
    return {
        "heatmap": hm,
        "rows": monotone,
        "argmax_informal_share": {"nu_ratio": best["nu_ratio"], "p": best["p"]},
    }


_DERIVED = {
    "validation": _derive_validation,
    "persona": _derive_persona,
    "dose_response": _derive_dose,
    "decile": _derive_decile,
    "sweep": _derive_sweep,
}

HEATMAP_COLUMNS = ("nu_ratio", "p", "mean_informal_share", "std_informal_share",
                   "mean_agent_delta", "std_agent_delta", "n")


def summary_json(summary: Mapping[str, Any]) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n"


def heatmap_csv(rows: Sequence[tuple[str, str, int, str, float]]) -> str:
    _, cells = _group(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEATMAP_COLUMNS)
    for r in heatmap_rows(cells):
        w.writerow([format_value(r[c]) for c in HEATMAP_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# results


@dataclass
class AggregateResult:
    experiment: str
    spec: ExperimentSpec
    records: list[RunRecord]
    rows: list[tuple[str, str, int, str, float]]
    summary: dict[str, Any]
    cells: list[Cell] = field(default_factory=list)

    def cell(self, label: str) -> dict[str, Any]:
        for c in self.summary["cells"]:
            if c["cell"] == label:
                return c
        raise KeyError(label)

    def mean(self, label: str, metric: str = "informal_share") -> float:
        return self.cell(label)["metrics"][metric]["mean"]

    def values(self, label: str, metric: str = "informal_share") -> list[float]:
        return [r.metrics[metric] for r in self.records if r.cell == label]

    @property
    def derived(self) -> dict[str, Any]:
        return self.summary.get("derived", {})

    def results_csv(self) -> str:
        return rows_to_csv(self.rows)

    def summary_json(self) -> str:
        return summary_json(self.summary)

    def heatmap_csv(self) -> str:
        return heatmap_csv(self.rows)


def run_experiment(spec: ExperimentSpec, cal: CalibrationData,
                   progress: Optional[Callable[[int, int], None]] = None) -> AggregateResult:
    records = execute(spec, cal, progress)
    rows = records_to_rows(spec.kind, records)
    return AggregateResult(spec.kind, spec, records, rows, summarize(rows), build_cells(spec, cal))


# ---------------------------------------------------------------------------
# one entry point per experiment


def _scale(base: SimulationConfig, population: Optional[int], steps: Optional[int]) -> SimulationConfig:
    if population is not None:
        base = replace(base, population=population)
    if steps is not None:
        base = replace(base, steps=steps)
    return base


def run_validation(config_id: str | Sequence[str], n: int, cal: CalibrationData,
                   backend: Optional[BackendSpec] = None, seed: int = 0, steps: Optional[int] = None,
                   workers: int = 1) -> AggregateResult:
    ids = (config_id,) if isinstance(config_id, str) else tuple(config_id)
    for cid in ids:
        if cid not in VALIDATION_CONFIGS:
            raise ExperimentError(f"unknown validation config {cid!r}; use I, II, III or IV")
    base = _scale(default_base("validation"), None, steps)
    spec = ExperimentSpec("validation", n, base, {"configs": ids, "backend_override": backend},
                          seed, workers)
    return run_experiment(spec, cal)


def run_persona_experiment(profile: str | Sequence[str], n: int, cal: CalibrationData,
                           trials: int = 1000, seed: int = 0, steps: Optional[int] = None,
                           workers: int = 1) -> AggregateResult:
    profiles = (profile,) if isinstance(profile, str) else tuple(profile)
    base = _scale(default_base("persona"), None, steps)
    spec = ExperimentSpec("persona", n, base, {"profiles": profiles, "trials": trials}, seed, workers)
    return run_experiment(spec, cal)


def run_dose_response(k_range: Iterable[int], n: int, cal: CalibrationData, seed: int = 0,
                      steps: Optional[int] = None, backend: Optional[BackendSpec] = None,
                      workers: int = 1) -> AggregateResult:
    base = _scale(default_base("dose_response"), None, steps)
    spec = ExperimentSpec("dose_response", n, base,
                          {"k_values": tuple(int(k) for k in k_range), "backend_override": backend},
                          seed, workers)
    return run_experiment(spec, cal)


def run_decile_analysis(variant: str | Sequence[str], population: int, steps: int, n: int,
                        cal: CalibrationData, seed: int = 0, backend: Optional[BackendSpec] = None,
                        workers: int = 1) -> AggregateResult:
    variants = (variant,) if isinstance(variant, str) else tuple(variant)
    base = _scale(default_base("decile"), population, steps)
    spec = ExperimentSpec("decile", n, base, {"variants": variants, "backend_override": backend},
                          seed, workers)
    return run_experiment(spec, cal)


def run_sweep(nu_grid: Sequence[float], p_grid: Sequence[float], n: int, cal: CalibrationData,
              seed: int = 0, population: Optional[int] = None, steps: Optional[int] = None,
              backend: Optional[BackendSpec] = None, workers: int = 1) -> AggregateResult:
    base = _scale(default_base("sweep"), population, steps)
    spec = ExperimentSpec("sweep", n, base,
                          {"nu_grid": tuple(nu_grid), "p_grid": tuple(p_grid), "backend_override": backend},
                          seed, workers)
    return run_experiment(spec, cal)


def grid(start: float, stop: float, step: float) -> tuple[float, ...]:
    """Inclusive arithmetic grid, rounded to kill float drift."""
    if step <= 0:
        raise ExperimentError("grid step must be > 0")
    if stop < start:
        raise ExperimentError("grid stop must be >= start")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(round(start + i * step, 10) for i in range(n))
