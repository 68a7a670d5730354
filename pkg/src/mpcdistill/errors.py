"""Exception types shared across the pipeline."""


class DomainError(ValueError):
    """A state left the region where the reactor model is defined."""


class SolverError(RuntimeError):
    """Every multistart branch of an optimal control solve failed."""

    def __init__(self, message: str, diagnostics: list | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ConfigError(ValueError):
    """Inconsistent or malformed configuration."""


class GenerationError(RuntimeError):
    """Too many scenario solves failed while building a dataset."""


class FormatError(ValueError):
    """A persisted file could not be parsed or has an unsupported version."""
