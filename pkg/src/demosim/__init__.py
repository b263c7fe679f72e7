"""Stochastic demographic microsimulation of the England & Wales population.

Individual-level births, deaths and international migration on a quarterly
clock, with scenario machinery for EU-referendum population projections.
"""

__version__ = "1.0.0"

from .core import Person, Population, SAEKey, Sex, SimDate, build_initial_population
from .errors import ConfigError, ConservationError, DataError, DemosimError
from .kernel import EventLedger, RunConfig, RunResult, run
from .migration import MigrationSchedule, calibrate_migration
from .rates import Dataset, load_dataset
from .scenarios import BUILTIN_SCENARIOS, ScenarioConfig, builtin_scenario, parse_scenario

__all__ = [
    "BUILTIN_SCENARIOS",
    "ConfigError",
    "ConservationError",
    "DataError",
    "Dataset",
    "DemosimError",
    "EventLedger",
    "MigrationSchedule",
    "Person",
    "Population",
    "RunConfig",
    "RunResult",
    "SAEKey",
    "ScenarioConfig",
    "Sex",
    "SimDate",
    "build_initial_population",
    "builtin_scenario",
    "calibrate_migration",
    "load_dataset",
    "parse_scenario",
    "run",
    "__version__",
]
