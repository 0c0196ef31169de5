import csv
import io
import subprocess
import sys
from pathlib import Path

import pytest
import tomli_w

from taxsim.cli import main

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def only_run_dir(root: Path) -> Path:
    dirs = [p for p in root.glob("*/*") if p.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


class TestExitCodes:
    def test_no_args(self):
        assert main([]) == 2

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 2

    def test_unknown_flag(self):
        assert main(["validate", "--bogus"]) == 2

    def test_bad_config_id(self):
        assert main(["validate", "--config", "V"]) == 2

    def test_bad_grid(self, tmp_path):
        assert main(["sweep", "--nu-grid", "1:0:0.5", "--out", str(tmp_path)]) == 2

    def test_missing_spec_file(self, tmp_path):
        assert main(["validate", "--spec", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2

    def test_missing_calibration_is_runtime_error(self, tmp_path):
        code = main(["run", "--reps", "1", "--population", "2", "--deciles", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path)])
        assert code == 1

    def test_report_missing(self, tmp_path):
        assert main(["report", str(tmp_path / "results.csv")]) == 2

    def test_console_script_module(self):
        proc = subprocess.run([sys.executable, "-m", "taxsim.cli"], capture_output=True, text=True)
        assert proc.returncode == 2


class TestOutputs:
    def test_validate_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["validate", "--config", "I", "--seed", "7", "--reps", "3", "--out", str(a)]) == 0
        assert main(["validate", "--config", "I", "--seed", "7", "--reps", "3", "--out", str(b)]) == 0
        ra = (only_run_dir(a) / "results.csv").read_bytes()
        rb = (only_run_dir(b) / "results.csv").read_bytes()
        assert ra == rb

    def test_artifacts_and_report(self, tmp_path, capsys):
        assert main(["validate", "--config", "III", "--reps", "2", "--out", str(tmp_path)]) == 0
        d = only_run_dir(tmp_path)
        assert d.parent.name == "validation"
        for name in ("results.csv", "summary.json", "config_echo.toml"):
            assert (d / name).exists()
        echo = tomllib.loads((d / "config_echo.toml").read_text())
        assert echo["experiment"]["kind"] == "validation"
        capsys.readouterr()
        assert main(["report", str(d)]) == 0
        assert capsys.readouterr().out == (d / "summary.json").read_text()

    def test_sweep_heatmap(self, tmp_path):
        code = main(["sweep", "--nu-grid", "0.5:1.5:0.25", "--p-grid", "0:1:0.25", "--reps", "1",
                     "--population", "2", "--out", str(tmp_path)])
        assert code == 0
        rows = list(csv.DictReader(io.StringIO((only_run_dir(tmp_path) / "heatmap.csv").read_text())))
        assert len(rows) == 25
        assert {float(r["nu_ratio"]) for r in rows} == {0.5, 0.75, 1.0, 1.25, 1.5}
        assert {float(r["p"]) for r in rows} == {0.0, 0.25, 0.5, 0.75, 1.0}

    def test_spec_file_and_flag_override(self, tmp_path):
        spec = tmp_path / "exp.toml"
        spec.write_text(tomli_w.dumps({
            "experiment": {"kind": "run", "repetitions": 2, "seed": 5},
            "simulation": {"population": 3, "steps": 365},
        }))
        assert main(["run", "--spec", str(spec), "--reps", "1", "--out", str(tmp_path / "o")]) == 0
        d = only_run_dir(tmp_path / "o")
        reps = {r["repetition"] for r in csv.DictReader(io.StringIO((d / "results.csv").read_text()))}
        assert reps == {"0"}
        echo = tomllib.loads((d / "config_echo.toml").read_text())
        assert echo["simulation"]["population"] == 3

    def test_independent_cells_flag(self, tmp_path):
        assert main(["validate", "--config", "I", "--config", "II", "--reps", "1", "--independent-cells",
                     "--out", str(tmp_path)]) == 0
        echo = tomllib.loads((only_run_dir(tmp_path) / "config_echo.toml").read_text())
        assert echo["experiment"]["common_random_numbers"] is False

    def test_api_key_not_echoed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TAXSIM_LLM_API_KEY", "sekrit")
        assert main(["run", "--reps", "1", "--population", "1", "--out", str(tmp_path)]) == 0
        assert "sekrit" not in (only_run_dir(tmp_path) / "config_echo.toml").read_text()
