import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lcskit.runner import run
from lcskit.scenario import load_scenario

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_RUNS: dict = {}
ACCEPTANCE: dict = {}  # criterion number -> (passed, detail)


def scenario_report(name: str):
    """Run a bundled scenario once per session and share the RunReport."""
    if name not in _RUNS:
        _RUNS[name] = run(load_scenario(name))
    return _RUNS[name]


@pytest.fixture(scope="session")
def cached_run():
    return scenario_report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
