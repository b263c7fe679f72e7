import numpy as np
import pytest

import demosim
from demosim.core import Codebook, SimDate
from demosim.kernel import RunConfig, run
from demosim.migration import MigrationSchedule, calibrate_migration
from demosim.rates import load_dataset
from demosim.scenarios import builtin_scenario

from pathlib import Path

BUNDLE = Path(demosim.__file__).parent / "data_bundle"


@pytest.fixture(scope="session")
def codebook():
    return Codebook()


@pytest.fixture(scope="session")
def dataset():
    return load_dataset(BUNDLE)


@pytest.fixture(scope="session")
def schedule(dataset):
    return calibrate_migration(dataset, 100_000, 0)


@pytest.fixture(scope="session")
def quick_run(dataset, schedule):
    """Short status-quo run shared by read-only tests."""
    cfg = RunConfig(
        end=SimDate(2003, 0), population_size=50_000, seed=11,
        scenario=builtin_scenario("status-quo"),
    )
    return run(cfg, dataset, schedule)


@pytest.fixture(scope="session")
def brexit_run(dataset, schedule):
    """Full radical run shared by wave/scenario tests."""
    cfg = RunConfig(population_size=100_000, seed=11, scenario=builtin_scenario("radical"))
    return run(cfg, dataset, schedule)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
