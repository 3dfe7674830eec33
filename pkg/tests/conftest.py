import time

import pytest

from flexgrid.experiment import ExperimentConfig, run_experiment

# one line per acceptance criterion, printed at the end of the session
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record_criterion():
    def record(number: int, passed: bool, detail: str):
        _ACCEPTANCE[number] = (bool(passed), detail)

    return record


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default experiment, run once per session, with its wall time."""
    out = tmp_path_factory.mktemp("default_run")
    t0 = time.perf_counter()
    run_experiment(ExperimentConfig(), out)
    return out, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
