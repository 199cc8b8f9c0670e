import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dcgm.dataio import make_toy

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA: dict[int, list[tuple[str, str]]] = {}


@pytest.fixture(scope="session")
def toy():
    """The default toy benchmark: 10 classes, 500 train / 100 test per class, 16x16."""
    return make_toy()


@pytest.fixture(scope="session")
def small_toy():
    return make_toy(classes=4, per_class=40, size=8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _CRITERIA.setdefault(marker.args[0], []).append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        outcomes = [o for _, o in results]
        if any(o == "failed" for o in outcomes):
            status = "FAIL"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif "passed" in outcomes:
            status = f"PARTIAL ({outcomes.count('skipped')} skipped)"
        else:
            status = "SKIP"
        names = ", ".join(name for name, _ in results)
        terminalreporter.write_line(f"criterion {n:>2}: {status}  ({names})")
