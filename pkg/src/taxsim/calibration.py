"""Calibration tables: income deciles, goods catalog, tax brackets, personas.

Bundled defaults live in ``taxsim/data`` and hold the US 2023 figures. Any
table can be replaced by passing a path; omitted ones fall back to the bundle.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from taxsim.econ import (
    EnforcementPolicy,
    Good,
    IncomeTaxSchedule,
    SalesTaxRate,
    ScheduleMode,
    normalize_weights,
)


class CalibrationError(ValueError):
    """A calibration file is malformed or fails validation."""


@dataclass(frozen=True)
class CalibrationData:
    income_deciles: tuple[float, ...]
    goods_catalog: tuple[Good, ...]
    tax_schedule: IncomeTaxSchedule
    sales_rate: SalesTaxRate
    enforcement_defaults: EnforcementPolicy
    persona_corpus: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.income_deciles) != 10:
            raise CalibrationError(f"expected 10 income deciles, got {len(self.income_deciles)}")
        if any(b <= a for a, b in zip(self.income_deciles, self.income_deciles[1:])):
            raise CalibrationError("income deciles must be strictly ascending")
        if not self.goods_catalog:
            raise CalibrationError("goods catalog is empty")
        total = sum(g.weight for g in self.goods_catalog)
        if abs(total - 1.0) > 1e-6:
            raise CalibrationError(f"goods weights sum to {total}, not 1")


def _bundled(name: str) -> str:
    return resources.files("taxsim").joinpath("data", name).read_text(encoding="utf-8")


def _rows(text: str, source: str, columns: Iterable[str]) -> list[tuple[int, dict[str, str]]]:
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in columns if c not in (reader.fieldnames or [])]
    if missing:
        raise CalibrationError(f"{source}: missing column(s) {', '.join(missing)}")
    out = []
    for row in reader:
        out.append((reader.line_num, row))
    return out


def _num(row: dict[str, str], key: str, source: str, line: int) -> float:
    try:
        return float(row[key].replace(",", ""))
    except (TypeError, ValueError, AttributeError):
        raise CalibrationError(f"{source}:{line}: bad {key} value {row.get(key)!r}") from None


def _read(path: str | Path | None, bundled: str) -> tuple[str, str]:
    if path is None:
        return _bundled(bundled), f"<bundled {bundled}>"
    p = Path(path)
    if not p.exists():
        raise CalibrationError(f"calibration file not found: {p}")
    return p.read_text(encoding="utf-8"), str(p)


def parse_deciles(text: str, source: str = "deciles.csv") -> tuple[float, ...]:
    rows = _rows(text, source, ("decile", "income"))
    values = tuple(_num(r, "income", source, ln) for ln, r in rows)
    if len(values) != 10:
        raise CalibrationError(f"{source}: expected 10 deciles, found {len(values)}")
    return values


def parse_brackets(text: str, source: str = "brackets.csv") -> IncomeTaxSchedule:
    rows = _rows(text, source, ("lower_bound", "rate"))
    brackets = tuple((_num(r, "lower_bound", source, ln), _num(r, "rate", source, ln)) for ln, r in rows)
    mode = ScheduleMode.FLAT if len(brackets) == 1 else ScheduleMode.PROGRESSIVE
    try:
        return IncomeTaxSchedule(brackets, mode)
    except ValueError as exc:
        raise CalibrationError(f"{source}: {exc}") from None


def parse_goods(text: str, source: str = "goods.csv", default_price: float = 1.0) -> tuple[Good, ...]:
    rows = _rows(text, source, ("id", "name", "weight"))
    goods = []
    for ln, r in rows:
        price = _num(r, "price", source, ln) if r.get("price") not in (None, "") else default_price
        try:
            goods.append(Good(int(_num(r, "id", source, ln)), r["name"], price, _num(r, "weight", source, ln)))
        except ValueError as exc:
            raise CalibrationError(f"{source}:{ln}: {exc}") from None
    if not goods:
        raise CalibrationError(f"{source}: no goods")
    return tuple(normalize_weights(goods))


def parse_policy(text: str, source: str = "policy.csv") -> tuple[SalesTaxRate, EnforcementPolicy]:
    rows = _rows(text, source, ("key", "value"))
    kv = {r["key"]: _num(r, "value", source, ln) for ln, r in rows}
    try:
        sales = SalesTaxRate(kv.get("sales_tax_rate", 0.0644))
        enf = EnforcementPolicy(
            audit_probability=kv.get("audit_probability", 0.1),
            penalty_rate=kv.get("penalty_rate", 0.75),
            fixed_fine=kv.get("fixed_fine", 100_000.0),
            audit_period=int(kv.get("audit_period", 365)),
        )
    except ValueError as exc:
        raise CalibrationError(f"{source}: {exc}") from None
    return sales, enf


PERSONA_IDS = ("law_abiding", "law_breaking", "random")


def load_persona_file(path: str | Path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(s.strip() for s in lines if s.strip())


def load_calibration(
    deciles: str | Path | None = None,
    goods: str | Path | None = None,
    brackets: str | Path | None = None,
    policy: str | Path | None = None,
    persona_dir: str | Path | None = None,
) -> CalibrationData:
    text, src = _read(deciles, "deciles.csv")
    dec = parse_deciles(text, src)
    text, src = _read(goods, "goods.csv")
    cat = parse_goods(text, src)
    text, src = _read(brackets, "brackets.csv")
    sched = parse_brackets(text, src)
    text, src = _read(policy, "policy.csv")
    sales, enf = parse_policy(text, src)
    corpus: dict[str, tuple[str, ...]] = {}
    if persona_dir is None:
        for pid in PERSONA_IDS:
            lines = _bundled(f"persona/{pid}.txt").splitlines()
            corpus[pid] = tuple(s.strip() for s in lines if s.strip())
    else:
        d = Path(persona_dir)
        if not d.is_dir():
            raise CalibrationError(f"persona directory not found: {d}")
        for f in sorted(d.glob("*.txt")):
            corpus[f.stem] = load_persona_file(f)
    return CalibrationData(dec, cat, sched, sales, enf, corpus)


def write_calibration(cal: CalibrationData, directory: str | Path) -> dict[str, Path]:
    """Write ``cal`` in the same CSV layout ``load_calibration`` reads."""
    d = Path(directory)
    (d / "persona").mkdir(parents=True, exist_ok=True)
    paths = {name: d / f"{name}.csv" for name in ("deciles", "goods", "brackets", "policy")}

    def write(path: Path, header: list[str], rows: list[list]) -> None:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    write(paths["deciles"], ["decile", "income"],
          [[i + 1, repr(v)] for i, v in enumerate(cal.income_deciles)])
    write(paths["goods"], ["id", "name", "weight", "price"],
          [[g.id, g.name, repr(g.weight), repr(g.price)] for g in cal.goods_catalog])
    write(paths["brackets"], ["lower_bound", "rate"],
          [[repr(b), repr(r)] for b, r in cal.tax_schedule.brackets])
    enf = cal.enforcement_defaults
    write(paths["policy"], ["key", "value"], [
        ["sales_tax_rate", repr(cal.sales_rate.rate)],
        ["audit_probability", repr(enf.audit_probability)],
        ["penalty_rate", repr(enf.penalty_rate)],
        ["fixed_fine", repr(enf.fixed_fine)],
        ["audit_period", enf.audit_period],
    ])
    for pid, lines in cal.persona_corpus.items():
        (d / "persona" / f"{pid}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["persona"] = d / "persona"
    return paths
