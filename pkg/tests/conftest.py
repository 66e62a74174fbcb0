import warnings

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, p, scale=1.0):
    A = rng.normal(size=(p, p))
    return scale * (A @ A.T + p * np.eye(p))


@pytest.fixture(autouse=True)
def _quiet_rank_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*rank deficient.*")
        yield


_criterion_lines = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one summary line per acceptance criterion.

    Call ``criterion(number, passed, detail)`` once the check is decided;
    the lines are printed together at the end of the session.
    """
    store = request.config.stash.setdefault(_criterion_lines, {})

    def record(number, passed, detail):
        store[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_criterion_lines, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
