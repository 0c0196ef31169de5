import pytest

from taxsim.calibration import load_calibration


@pytest.fixture(scope="session")
def cal():
    return load_calibration()


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n:2d}: SKIP  not run in this session")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
