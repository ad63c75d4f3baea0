import numpy as np
import pytest

from torusctl.recurrence import GridDiscretization, approximate_minimal_set, build_chain_graph
from torusctl.systems import circle_system, gated_torus, irrational_system, vertical_system


@pytest.fixture(scope="session")
def gated():
    return gated_torus()


@pytest.fixture(scope="session")
def circle():
    return circle_system()


@pytest.fixture(scope="session")
def irrational():
    return irrational_system()


@pytest.fixture(scope="session")
def vertical():
    return vertical_system()


@pytest.fixture(scope="session")
def gated_graph(gated):
    return build_chain_graph(gated.V, GridDiscretization.of(64), tau_step=1.0, dt=2e-2)


@pytest.fixture(scope="session")
def gated_min_set(gated):
    return approximate_minimal_set(gated.V, GridDiscretization.of(32), T_long=50.0, dt=2e-2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting: one PASS/FAIL line per criterion ------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    num, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if rep.failed:
        msg = str(rep.longrepr).strip().splitlines()[-1] if rep.longrepr else ""
        detail = f"{detail}; {msg}" if detail else msg
    _CRITERIA[num] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[num]
        terminalreporter.write_line(f"{status} criterion {num}: {title}" + (f" [{detail}]" if detail else ""))
