"""Exception hierarchy shared across the package."""


class GrmError(Exception):
    """Base class for all package errors."""


class ShapeError(GrmError):
    """Operand shapes are incompatible. Message names both shapes."""


class DomainError(GrmError):
    """Input outside an operation's documented domain (log of <= 0, etc.)."""


class ParameterError(GrmError):
    """Invalid configuration or hyperparameter value."""


class DegenerateSliceError(GrmError):
    """A reduction slice or token set has no valid (unmasked) entries."""


class ContractError(GrmError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class DeterminismError(GrmError):
    """A closure that must be deterministic produced differing values."""


class NonFiniteLossError(GrmError):
    """Training produced a NaN/Inf loss component."""

    def __init__(self, component: str):
        super().__init__(f"non-finite loss component: {component}")
        self.component = component


class FormatError(GrmError):
    """Base class for file parse errors."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncationError(FormatError):
    """File ends before the payload declared in its header."""


class InconsistencyError(FormatError):
    """Header fields and payload contents disagree."""


class VersionError(FormatError):
    """Checkpoint was written with an unsupported format version."""
