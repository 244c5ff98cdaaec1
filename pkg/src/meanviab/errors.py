"""Exception types shared across the package."""


class MeanViabError(Exception):
    """Base class for all package errors."""


class DomainError(MeanViabError, ValueError):
    """An argument lies outside the domain of an operation (e.g. t > T)."""


class StructuralError(MeanViabError, ValueError):
    """Incompatible shapes, grids or dimensions."""


class PreconditionError(DomainError):
    """A mathematical precondition of an operation does not hold."""


class SimulationError(MeanViabError, RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class ConfigError(MeanViabError, ValueError):
    """Malformed problem or run configuration."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
