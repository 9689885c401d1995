import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from facegeom.fixtures import Bump, FixtureSpec, PlantedAffine, generate_fixture

settings.register_profile(
    "default", deadline=None, max_examples=30,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# filled in by test_acceptance.py, printed at the end of the session
ACCEPTANCE = {}

PLANTED = PlantedAffine((5.0, -8.0, 3.0), (1.05, 0.95, 1.0), (3.0, -2.0, 5.0))
BUMP = Bump(5.0, (0.2, 0.1), 0.35)


@pytest.fixture(scope="session")
def sphere_fixture():
    return generate_fixture(FixtureSpec())


@pytest.fixture(scope="session")
def paraboloid_fixture():
    return generate_fixture(FixtureSpec(kind="paraboloid"))


@pytest.fixture(scope="session")
def plane_fixture():
    return generate_fixture(FixtureSpec(kind="embossed_plane"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {key:>2}: {line}")
