"""Exception hierarchy shared by all modules."""


class ThermoporoError(Exception):
    pass


class ConfigurationError(ThermoporoError, ValueError):
    """Invalid user-facing configuration (mesh sizes, degrees, parameters)."""


class ModelError(ThermoporoError):
    """A physical model quantity could not be evaluated."""


class DataError(ThermoporoError, ValueError):
    """Non-finite or otherwise unusable field data."""


class SolverError(ThermoporoError, RuntimeError):
    """Linear or nonlinear solve failed."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
