import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import synthetic_run  # noqa: E402


@pytest.fixture(scope="session")
def harmonic_dagger():
    return synthetic_run("Harmonic", "DaggerAggregate", 200, seed=0)


@pytest.fixture(scope="session")
def fixed_supervisor_run():
    return synthetic_run("Zero", "DaggerAggregate", 40, seed=3)
