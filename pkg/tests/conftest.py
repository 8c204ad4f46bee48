import numpy as np
import pytest
from threadpoolctl import threadpool_limits

# criterion number -> (title, outcome, detail), filled by the acceptance tests
ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    num, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ACCEPTANCE[num] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[num]
        line = f"criterion {num} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    # fixed BLAS thread count keeps float reductions reproducible
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
