import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("fapt", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fapt"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# -- acceptance summary: one PASS/FAIL line per @pytest.mark.criterion(n, title) ----------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    ok, seen = _CRITERIA.get(number, (True, title))[0], title
    if rep.failed or (rep.when == "call" and rep.skipped):
        ok = False
    _CRITERIA[number] = (ok, seen)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")
