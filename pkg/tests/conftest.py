import numpy as np
import pytest

from gridvolt.powerflow import load_grid


@pytest.fixture(scope="session")
def grid2():
    return load_grid("2bus")


@pytest.fixture(scope="session")
def grid13():
    return load_grid("ieee13")


@pytest.fixture(scope="session")
def grid34():
    return load_grid("ieee34")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting: one PASS/FAIL line per criterion ------------------------
# Tests marked ``@pytest.mark.criterion(n, title)`` may attach measured values with
# ``request.node.user_properties.append(("detail", text))``; they are shown in the summary.

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    _, ok, details = _CRITERIA.get(n, (title, True, []))
    details = details + [v for k, v in item.user_properties if k == "detail" and v not in details]
    _CRITERIA[n] = (title, ok and rep.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[n]
        line = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" | {'; '.join(details)}" if details else ""))
