class SimulationError(Exception):
    """Base class for every failure the harness reports."""
    exit_code = 1


class ConfigError(SimulationError, ValueError):
    """Invalid or inconsistent configuration (also used for shape mismatches)."""
    exit_code = 2


class EnumerationCapExceeded(ConfigError):
    """Exact enumeration would visit more outcomes than the configured cap."""

    def __init__(self, outcomes, cap):
        super().__init__(f"exact enumeration needs {outcomes} outcomes, cap is {cap}")
        self.outcomes = outcomes
        self.cap = cap


class DataError(SimulationError, ValueError):
    """Missing, empty or malformed data."""
    exit_code = 3


class SurrogateFitError(DataError):
    """A surrogate could not be fitted (too few samples, singular covariance)."""


class NumericDivergenceError(SimulationError, ArithmeticError):
    """A chain produced a non-finite gradient or state."""
    exit_code = 4
