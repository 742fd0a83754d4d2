"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: :class:`ConfigError` and
:class:`ParameterError` -> 2, :class:`NumericalError` -> 3,
:class:`ArtifactIOError` -> 4.
"""


class ArtifactError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ArtifactError):
    pass


class ParameterError(ArtifactError, ValueError):
    pass


class ShapeError(ArtifactError, ValueError):
    pass


class FormatError(ArtifactError, ValueError):
    pass


class DegenerateScaleError(ArtifactError, ValueError):
    pass


class DomainError(ArtifactError, ValueError):
    pass


class GeometryError(ArtifactError, ValueError):
    pass


class NumericalError(ArtifactError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class CorrelationError(NumericalError):
    pass


class NotFoundError(ArtifactError, LookupError):
    pass


class DataError(ArtifactError, ValueError):
    pass


class ArtifactIOError(ArtifactError, OSError):
    pass


class StageError(ArtifactError):
    """Failure inside a pipeline stage; ``stage`` names where it happened."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
