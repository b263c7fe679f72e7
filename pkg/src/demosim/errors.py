"""Exception taxonomy, kept flat on purpose: the CLI maps these to exit codes."""


class DemosimError(Exception):
    """Base class for everything this package raises deliberately."""


class DataError(DemosimError):
    """Malformed or inconsistent input data (bad CSV, missing table, ...)."""


class ConfigError(DemosimError):
    """Invalid run configuration or scenario definition."""


class ConservationError(DemosimError):
    """The per-cell bookkeeping identity failed -- a bug, never user error."""
