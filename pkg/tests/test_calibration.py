import pytest

from taxsim.calibration import (
    CalibrationError,
    load_calibration,
    parse_brackets,
    parse_deciles,
    parse_goods,
    write_calibration,
)
from taxsim.econ import ScheduleMode


def test_bundled_deciles(cal):
    assert cal.income_deciles[0] == 18_980
    assert cal.income_deciles[-1] == 316_100
    assert len(cal.income_deciles) == 10


def test_bundled_schedule(cal):
    s = cal.tax_schedule
    assert len(s.brackets) == 7
    assert s.top_rate == 0.37
    assert s.marginal_rate(578_126) == 0.37
    assert s.marginal_rate(578_124) == 0.35


def test_bundled_sales_rate_and_goods(cal):
    assert cal.sales_rate.rate == pytest.approx(0.0644)
    assert sum(g.weight for g in cal.goods_catalog) == pytest.approx(1.0)
    assert all(g.price > 0 for g in cal.goods_catalog)


def test_bundled_personas(cal):
    assert set(cal.persona_corpus) == {"law_abiding", "law_breaking", "random"}
    assert all(len(v) >= 20 for v in cal.persona_corpus.values())


def test_round_trip(cal, tmp_path):
    paths = write_calibration(cal, tmp_path)
    again = load_calibration(paths["deciles"], paths["goods"], paths["brackets"], paths["policy"],
                             paths["persona"])
    assert again == cal


def test_nine_deciles_rejected():
    text = "decile,income\n" + "".join(f"{i},{1000 * i}\n" for i in range(1, 10))
    with pytest.raises(CalibrationError, match="10"):
        parse_deciles(text)


def test_descending_deciles_rejected(cal, tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("decile,income\n" + "".join(f"{i},{100_000 - i}\n" for i in range(1, 11)))
    with pytest.raises(CalibrationError, match="ascending"):
        load_calibration(deciles=p)


def test_malformed_row_reports_line_number():
    text = "decile,income\n1,100\n2,abc\n"
    with pytest.raises(CalibrationError, match=r":3: bad income"):
        parse_deciles(text)


def test_missing_column():
    with pytest.raises(CalibrationError, match="missing column"):
        parse_goods("id,name\n1,x\n")


def test_single_bracket_is_flat():
    s = parse_brackets("lower_bound,rate\n0,0.2\n")
    assert s.mode is ScheduleMode.FLAT


def test_goods_weights_are_normalised():
    goods = parse_goods("id,name,weight\n1,a,2\n2,b,2\n")
    assert [g.weight for g in goods] == [0.5, 0.5]
    assert all(g.price == 1.0 for g in goods)


def test_missing_file(tmp_path):
    with pytest.raises(CalibrationError, match="not found"):
        load_calibration(deciles=tmp_path / "nope.csv")
