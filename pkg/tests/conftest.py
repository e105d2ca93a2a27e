import pytest

from toamim import cli


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Output directory of one full smoke pipeline run through the command line."""
    out = tmp_path_factory.mktemp("smoke") / "run"
    assert cli.main(["all", "--config", "smoke", "--out", str(out), "--workers", "1"]) == 0
    return out


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Remember one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
