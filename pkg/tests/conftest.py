import numpy as np
import pytest
from hypothesis import strategies as st

from fisher_prd.market import MarketInstance, generate_random_market

SYM_A = [[0.8, 0.2], [0.2, 0.8]]
HALF = [0.5, 0.5]


@pytest.fixture
def sym():
    return MarketInstance(budgets=HALF, valuations=SYM_A)


@pytest.fixture
def uniform_bids():
    return np.full((2, 2), 0.25)


@pytest.fixture
def diagonal_bids():
    return np.array([[0.5, 0.0], [0.0, 0.5]])


def random_profile(market, rng, interior=True):
    """Feasible bids; strictly positive on the valuation support when ``interior``."""
    raw = rng.uniform(0.05 if interior else 0.0, 1.0, size=(market.n, market.m))
    if not interior:
        raw[rng.random(raw.shape) < 0.3] = 0.0
        raw[np.arange(market.n), rng.integers(0, market.m, market.n)] += 0.1
    raw = np.where(market.interest, raw, 0.0)
    return raw / raw.sum(axis=1, keepdims=True) * market.budgets[:, None]


@st.composite
def markets(draw, max_n=6, max_m=6):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(1, max_m))
    seed = draw(st.integers(0, 2**32 - 1))
    return generate_random_market(n, m, seed)


# --------------------------------------------------------------------------
# acceptance verdicts: one PASS/FAIL line per criterion in the terminal summary

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.failed:
        reason = str(call.excinfo.value).strip().splitlines()[0] if call.excinfo else ""
        _VERDICTS[number] = f"AC{number:<2} FAIL  {title}" + (f"  ({reason})" if reason else "")
    elif report.when == "call" and report.passed:
        _VERDICTS[number] = f"AC{number:<2} PASS  {title}"


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
