"""Command-line entry point: ``taxsim <experiment> [flags]``.

Each experiment writes ``<out>/<experiment>/<timestamp>/`` holding
``results.csv``, ``summary.json`` and ``config_echo.toml`` (plus
``heatmap.csv`` for sweeps). ``report`` rebuilds a summary from a results file.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import tomli_w

from taxsim import __version__
from taxsim.calibration import CalibrationData, CalibrationError, load_calibration
from taxsim.econ import EnforcementPolicy, PublicGoodsFunction, PublicGoodsKind, PublicGoodsMode
from taxsim.experiments import (
    DECILE_VARIANTS,
    PERSONA_PROFILES,
    VALIDATION_CONFIGS,
    AggregateResult,
    ExperimentError,
    ExperimentSpec,
    default_base,
    grid,
    heatmap_csv,
    read_rows,
    run_experiment,
    summarize,
    summary_json,
)
from taxsim.llm import BackendError, BackendSpec, RemoteSettings
from taxsim.world import AgentTraits, ConfigError, ConservationError, SimulationConfig, to_jsonable

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

log = logging.getLogger("taxsim")

DEFAULT_REPS = {"validation": 20, "persona": 100, "dose_response": 30, "decile": 10, "sweep": 10, "run": 1}
COMMAND_KIND = {"validate": "validation", "persona": "persona", "dose": "dose_response",
                "decile": "decile", "sweep": "sweep", "run": "run"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _grid_arg(text: str) -> tuple[float, ...]:
    parts = text.split(":")
    try:
        if len(parts) == 3:
            return grid(float(parts[0]), float(parts[1]), float(parts[2]))
        return tuple(float(x) for x in text.split(","))
    except (ValueError, ExperimentError) as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: use start:stop:step or a,b,c ({exc})")


def _range_arg(text: str) -> tuple[int, ...]:
    lo, sep, hi = text.partition(":")
    try:
        if not sep:
            return (int(lo),)
        a, b = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}: use a:b")
    if b < a:
        raise argparse.ArgumentTypeError(f"bad range {text!r}: end before start")
    return tuple(range(a, b + 1))


def _backend_arg(text: str) -> BackendSpec:
    try:
        return BackendSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--seed", type=int, help="master seed (default 0)")
    g.add_argument("--reps", type=_positive, help="repetitions per cell")
    g.add_argument("--population", type=_positive, help="number of agents N")
    g.add_argument("--steps", type=_positive, help="number of steps T")
    g.add_argument("--backend", type=_backend_arg,
                   help="scripted:<profile>[:k] or remote (remote reads TAXSIM_LLM_* variables)")
    g.add_argument("--out", type=Path, help="output root directory (default ./results)")
    g.add_argument("--workers", type=_positive, help="parallel worker processes (default 1)")
    g.add_argument("--spec", type=Path, help="experiment spec file (TOML); flags override it")
    g.add_argument("--deciles", type=Path, help="income deciles CSV")
    g.add_argument("--goods", type=Path, help="goods catalog CSV")
    g.add_argument("--brackets", type=Path, help="income-tax brackets CSV")
    g.add_argument("--policy", type=Path, help="sales tax and enforcement defaults CSV")
    g.add_argument("--persona-dir", type=Path, help="directory of persona/<id>.txt files")
    g.add_argument("--independent-cells", action="store_true",
                   help="give every cell its own seeds instead of common random numbers")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="taxsim", description="Agent-based tax-compliance simulator.")
    p.add_argument("--version", action="version", version=f"taxsim {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("validate", parents=[common], help="single-agent validation configs I-IV")
    s.add_argument("--config", action="append", choices=sorted(VALIDATION_CONFIGS), dest="configs",
                   help="config id; repeat for several (default all four)")

    s = sub.add_parser("persona", parents=[common], help="persona incidence experiment")
    s.add_argument("--profile", action="append", choices=PERSONA_PROFILES, dest="profiles")
    s.add_argument("--trials", type=int, help="single-decision trials per profile (default 1000)")

    s = sub.add_parser("dose", parents=[common], help="synthetic-message dose-response")
    s.add_argument("--k-range", type=_range_arg, help="message counts a:b (default 0:20)")

    s = sub.add_parser("decile", parents=[common], help="per-decile analysis under public-goods variants")
    s.add_argument("--variant", action="append", choices=DECILE_VARIANTS, dest="variants")

    s = sub.add_parser("sweep", parents=[common], help="public-goods ratio x audit probability heatmap")
    s.add_argument("--nu-grid", type=_grid_arg, help="public-goods value per tax dollar, start:stop:step")
    s.add_argument("--p-grid", type=_grid_arg, help="audit probability, start:stop:step")

    s = sub.add_parser("run", parents=[common], help="repeat one configuration")
    s.add_argument("--nu", type=float, help="linear public-goods slope")
    s.add_argument("--nu-kind", choices=[k.value for k in PublicGoodsKind if k is not PublicGoodsKind.CUSTOM_TABLE])
    s.add_argument("--tau-star", type=float, help="socialist anchor")
    s.add_argument("--pooled", action=argparse.BooleanOptionalAction, default=None,
                   help="share public goods across the population")
    s.add_argument("--audit-probability", type=float)
    s.add_argument("--audit-period", type=_positive)
    s.add_argument("--penalty-rate", type=float)
    s.add_argument("--fine", type=float)

    s = sub.add_parser("report", help="rebuild summary.json from an existing results.csv")
    s.add_argument("results", type=Path, help="results.csv or the run directory holding it")
    s.add_argument("--output", type=Path, help="write here instead of printing")
    return p


# ---------------------------------------------------------------------------
# spec files


def load_spec_file(path: Path) -> dict[str, Any]:
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"spec file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"spec file {path}: {exc}")
    unknown = set(doc) - {"simulation", "experiment", "backend", "output", "calibration"}
    if unknown:
        raise UsageError(f"spec file {path}: unknown section(s) {', '.join(sorted(unknown))}")
    return doc


def _grid_value(v: Any) -> tuple[float, ...]:
    if isinstance(v, str):
        return _grid_arg(v)
    return tuple(float(x) for x in v)


_SIM_KEYS = {"population", "steps", "seed", "welfare_discount", "salary_period", "goods_per_month",
             "spend_share", "initial_balance_months", "initial_budget_fraction", "persona_id",
             "persona_window", "check_conservation"}


def _apply_simulation(base: SimulationConfig, sim: dict[str, Any]) -> SimulationConfig:
    sim = dict(sim)
    unknown = set(sim) - _SIM_KEYS - {"public_goods", "enforcement", "traits"}
    if unknown:
        raise UsageError(f"[simulation]: unknown key(s) {', '.join(sorted(unknown))}")
    kw = {k: sim[k] for k in _SIM_KEYS if k in sim and k != "seed"}
    if "public_goods" in sim:
        pg = dict(sim["public_goods"])
        pg.setdefault("mode", base.public_goods.mode.value)
        if "points" in pg:
            pg["points"] = tuple(tuple(x) for x in pg["points"])
        kw["public_goods"] = PublicGoodsFunction(**pg)
    if "enforcement" in sim:
        cur = asdict(base.enforcement) if base.enforcement else {}
        cur.update(sim["enforcement"])
        kw["enforcement"] = EnforcementPolicy(**cur)
    if "traits" in sim:
        kw["traits"] = AgentTraits(**sim["traits"])
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[simulation]: {exc}")


def _backend_from_doc(doc: dict[str, Any]) -> Optional[BackendSpec]:
    be = doc.get("backend")
    if not be:
        return None
    text = be.get("spec", "scripted:full_pay")
    if text == "remote":
        overrides = {k: be[k] for k in ("endpoint", "model", "temperature", "timeout", "max_retries",
                                        "backoff_base", "min_interval") if k in be}
        return BackendSpec("remote_chat", None, remote=RemoteSettings.from_env(**overrides))
    try:
        return BackendSpec.parse(text)
    except ValueError as exc:
        raise UsageError(f"[backend]: {exc}")


# ---------------------------------------------------------------------------
# assembling an experiment


def _calibration(args, doc: dict[str, Any]) -> CalibrationData:
    cal_doc = doc.get("calibration", {})

    def pick(name: str):
        v = getattr(args, name.replace("-", "_"), None)
        return v if v is not None else cal_doc.get(name.replace("-", "_"))

    return load_calibration(
        deciles=pick("deciles"), goods=pick("goods"), brackets=pick("brackets"),
        policy=pick("policy"), persona_dir=pick("persona-dir"),
    )


def build_spec(args, doc: dict[str, Any]) -> ExperimentSpec:
    kind = COMMAND_KIND[args.command]
    exp = dict(doc.get("experiment", {}))
    if "kind" in exp and exp["kind"] != kind:
        raise UsageError(f"spec file is for {exp['kind']!r}, not {kind!r}")
    base = default_base(kind)
    base = _apply_simulation(base, doc.get("simulation", {}))
    if args.population is not None:
        base = replace(base, population=args.population)
    if args.steps is not None:
        base = replace(base, steps=args.steps)
    backend = args.backend or _backend_from_doc(doc)

    params: dict[str, Any] = {}
    if kind == "validation":
        params["configs"] = tuple(args.configs or exp.get("configs", VALIDATION_CONFIGS))
    elif kind == "persona":
        params["profiles"] = tuple(args.profiles or exp.get("profiles", PERSONA_PROFILES))
        params["trials"] = args.trials if args.trials is not None else int(exp.get("trials", 1000))
    elif kind == "dose_response":
        if args.k_range is not None:
            ks = args.k_range
        elif "k_min" in exp or "k_max" in exp:
            ks = tuple(range(int(exp.get("k_min", 0)), int(exp.get("k_max", 20)) + 1))
        else:
            ks = tuple(range(21))
        params["k_values"] = ks
    elif kind == "decile":
        params["variants"] = tuple(args.variants or exp.get("variants", DECILE_VARIANTS))
    elif kind == "sweep":
        params["nu_grid"] = args.nu_grid or _grid_value(exp.get("nu_grid", "0.5:1.5:0.25"))
        params["p_grid"] = args.p_grid or _grid_value(exp.get("p_grid", "0:1:0.25"))
    elif kind == "run":
        base = _apply_run_flags(base, args)
    if backend is not None:
        if kind == "run":
            base = replace(base, decision_backend=backend)
        else:
            params["backend_override"] = backend

    seed = args.seed if args.seed is not None else int(exp.get("seed", doc.get("simulation", {}).get("seed", 0)))
    reps = args.reps or int(exp.get("repetitions", DEFAULT_REPS[kind]))
    workers = args.workers or int(doc.get("output", {}).get("workers", 1))
    crn = not args.independent_cells and bool(exp.get("common_random_numbers", True))
    spec = ExperimentSpec(kind, reps, base, params, seed, workers, crn)
    try:
        spec.validate()
        base.validate()
    except (ExperimentError, ConfigError) as exc:
        raise UsageError(str(exc))
    return spec


def _apply_run_flags(base: SimulationConfig, args) -> SimulationConfig:
    pg = base.public_goods
    mode = pg.mode
    if args.pooled is not None:
        mode = PublicGoodsMode.POOLED if args.pooled else PublicGoodsMode.INDIVIDUAL
    kind = PublicGoodsKind(args.nu_kind) if args.nu_kind else pg.kind
    k = args.nu if args.nu is not None else pg.k
    tau_star = args.tau_star if args.tau_star is not None else pg.tau_star
    try:
        base = replace(base, public_goods=PublicGoodsFunction(kind, k=k, tau_star=tau_star,
                                                             points=pg.points, mode=mode))
        enf = base.enforcement or EnforcementPolicy()
        changes = {}
        if args.audit_probability is not None:
            changes["audit_probability"] = args.audit_probability
        if args.audit_period is not None:
            changes["audit_period"] = args.audit_period
        if args.penalty_rate is not None:
            changes["penalty_rate"] = args.penalty_rate
        if args.fine is not None:
            changes["fixed_fine"] = args.fine
        return replace(base, enforcement=replace(enf, **changes))
    except ValueError as exc:
        raise UsageError(str(exc))


# ---------------------------------------------------------------------------
# output


def _strip_none(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_strip_none(v) for v in obj if v is not None]
    return obj


def _cell_echo(cell) -> dict[str, Any]:
    cfg = cell.config
    enf = cfg.enforcement
    return {
        "label": cell.label,
        "backend": cfg.decision_backend.label,
        "public_goods": asdict(cfg.public_goods),
        "enforcement": asdict(enf) if enf else None,
        "persona_id": cfg.persona_id,
        "persona_extra_lines": len(cfg.persona_extra),
    }


def config_echo(spec: ExperimentSpec, cells=()) -> dict[str, Any]:
    params = {}
    for k, v in spec.params.items():
        if isinstance(v, BackendSpec):
            params[k] = v.label
        else:
            params[k] = list(v) if isinstance(v, (tuple, list, range)) else v
    base = spec.base.echo()
    remote = base.get("decision_backend", {}).get("remote")
    if remote:
        remote.pop("api_key", None)
    return _strip_none(to_jsonable({
        "taxsim_version": __version__,
        "experiment": {
            "kind": spec.kind, "repetitions": spec.repetitions, "master_seed": spec.master_seed,
            "workers": spec.workers, "common_random_numbers": spec.common_random_numbers,
            "seed_derivation": "blake2b-64(master:kind:cell:repetition)"
                               + (" with cell held at 0" if spec.common_random_numbers else ""),
            "params": params,
        },
        "simulation": base,
        "cells": [_cell_echo(c) for c in cells],
    }))


def _run_dir(root: Path, experiment: str) -> Path:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    d = root / experiment / stamp
    i = 1
    while d.exists():
        d = root / experiment / f"{stamp}-{i}"
        i += 1
    d.mkdir(parents=True)
    return d


def write_outputs(result: AggregateResult, root: Path) -> Path:
    d = _run_dir(root, result.experiment)
    (d / "results.csv").write_text(result.results_csv(), encoding="utf-8")
    (d / "summary.json").write_text(result.summary_json(), encoding="utf-8")
    (d / "config_echo.toml").write_text(tomli_w.dumps(config_echo(result.spec, result.cells)), encoding="utf-8")
    if result.experiment == "sweep":
        (d / "heatmap.csv").write_text(result.heatmap_csv(), encoding="utf-8")
    return d


def _report(args) -> int:
    path = args.results
    if path.is_dir():
        path = path / "results.csv"
    if not path.exists():
        raise UsageError(f"results file not found: {path}")
    rows = read_rows(path.read_text(encoding="utf-8"))
    text = summary_json(summarize(rows))
    if args.output:
        args.output.write_text(text, encoding="utf-8")
        if rows and rows[0][0] == "sweep":
            args.output.with_name("heatmap.csv").write_text(heatmap_csv(rows), encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _headline(result: AggregateResult) -> str:
    lines = []
    for c in result.summary["cells"]:
        m = c["metrics"].get("informal_share") or c["metrics"].get("suggested_evasion")
        name = "O_bar" if "informal_share" in c["metrics"] else "incidence"
        lines.append(f"  {c['cell']}: {name} {m['mean']:.4f} +/- {m['std']:.4f} (n={m['n']})")
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            return _report(args)
        doc = load_spec_file(args.spec) if args.spec else {}
        spec = build_spec(args, doc)
        cal = _calibration(args, doc)
        out_root = args.out or Path(doc.get("output", {}).get("dir", "results"))

        def progress(i: int, n: int) -> None:
            log.info("run %d/%d", i, n)

        result = run_experiment(spec, cal, progress)
        d = write_outputs(result, out_root)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"taxsim: error: {exc}", file=sys.stderr)
        return 2
    except (ExperimentError, CalibrationError, BackendError, ConservationError, ConfigError,
            OSError, ValueError) as exc:
        print(f"taxsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{result.experiment}: wrote {d}")
    print(_headline(result))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
