import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from routine_relapse.synth import SynthSpec, generate_cohort

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def tiny_synth():
    """Small cohort shared by tests that only need realistic shapes."""
    return generate_cohort(SynthSpec(n_patients=6, days_per_patient=70, n_relapses=3, n_relapse_patients=2,
                                     seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; returns ``ok``."""
    def record(number: int, ok: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
