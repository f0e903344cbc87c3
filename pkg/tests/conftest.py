import numpy as np
import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    cid = mark.args[0]
    ok = rep.passed
    prev = _CRITERIA.get(cid, True)
    _CRITERIA[cid] = prev and ok


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        terminalreporter.write_line(f"{cid}: {'PASS' if _CRITERIA[cid] else 'FAIL'}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
