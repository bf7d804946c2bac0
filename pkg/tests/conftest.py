import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ogemm.device import transmittance_table
from ogemm.experiments import reference_device
from ogemm.materials import load_materials

settings.register_profile("ci", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def table():
    return load_materials()


@pytest.fixture(scope="session")
def ref_genome():
    return reference_device()


@pytest.fixture(scope="session")
def ref_tt(table, ref_genome):
    return transmittance_table(ref_genome, table)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, print it, and fail the test when it does not pass."""

    def record(number: int, ok: bool, detail: str, seconds: float) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s) {detail}"
        request.config.stash.setdefault(_CRITERIA_KEY, []).append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
