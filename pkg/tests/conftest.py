import numpy as np
import pytest

from foanil.task_model import make_ground_truth


@pytest.fixture
def small_gt():
    return make_ground_truth(8, 2, "diag_linear", "zero", 0.5, rng=11)


@pytest.fixture
def iso_gt():
    return make_ground_truth(12, 3, "isotropic(1)", "zero", 2.0, rng=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and echo it."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def emit(criterion: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {criterion:<28s} {detail}"
        lines.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
