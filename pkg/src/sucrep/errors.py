"""Exception types shared across the package.

The CLI maps these onto exit codes, so keep the hierarchy flat.
"""


class SucrepError(Exception):
    pass


class DimensionError(SucrepError, ValueError):
    """Array shapes disagree."""


class DomainError(SucrepError, ValueError):
    """An argument lies outside its admissible range (e.g. gamma >= 1)."""


class StateError(SucrepError):
    """An object is in the wrong state for the requested operation."""


class NumericError(SucrepError, ArithmeticError):
    """Non-finite values, singular systems, divergence."""


class PreconditionError(SucrepError):
    """A modelling assumption required by an algorithm does not hold."""


class GenerationError(SucrepError):
    """Dataset generation could not satisfy its constraints."""


class ConfigError(SucrepError, ValueError):
    """Malformed or inconsistent configuration."""


class ArtifactError(SucrepError):
    """A persisted artifact does not match what the caller expects."""
