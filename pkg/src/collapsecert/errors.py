"""Exception hierarchy shared across the package."""


class CollapseCertError(Exception):
    """Base class for all library errors."""


class InvalidInput(CollapseCertError):
    """An argument violates a documented precondition."""


class ShapeError(CollapseCertError):
    """Tensor shapes are incompatible; message carries both shapes."""


class ConfigError(CollapseCertError):
    """A run configuration is inconsistent or incomplete."""


class InternalConsistencyError(CollapseCertError):
    """A quantity violated an identity it is required to satisfy."""


class ParseError(CollapseCertError):
    """A file could not be parsed; message carries the line number."""


class FitDegenerate(CollapseCertError):
    """Mixture fitting exhausted its empty-component recovery budget."""


class SearchFailed(CollapseCertError):
    """Every teacher candidate failed to fit."""


class DivergedError(CollapseCertError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class CacheMismatch(CollapseCertError):
    """A target cache does not match the teacher or dataset it is used with."""
