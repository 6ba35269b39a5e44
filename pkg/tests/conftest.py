import numpy as np
import pytest

from sqzforge import fit

_RUNS = {"count": 0}


def _check_monotone_cost(result):
    hist = np.asarray(result.cost_history, dtype=float)
    _RUNS["count"] += 1
    if len(hist) > 1:
        rises = np.diff(hist)
        assert np.all(rises <= 1e-12 * np.maximum(hist[:-1], 1e-300)), (
            f"{result.model}: cost rose on an accepted step: {hist.tolist()}")


@pytest.fixture(autouse=True, scope="session")
def monotone_cost_everywhere():
    """Every LM run in the suite must have a non-increasing accepted-cost history."""
    fit.add_observer(_check_monotone_cost)
    yield _RUNS
    fit.remove_observer(_check_monotone_cost)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """``criterion number -> (status, title, details)``, printed at the end of the run."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        status, title, details = log[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {title}")
        for line in details:
            terminalreporter.write_line(f"         {line}")
