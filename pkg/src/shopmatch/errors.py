"""Exception hierarchy. Every error raised by the library derives from
ShopmatchError so the CLI can map failures onto one-line error categories."""


class ShopmatchError(Exception):
    """Base class; `category` feeds the CLI's machine-parsable error line."""

    category = "internal"


class ShapeError(ShopmatchError):
    """Operand dimensions do not line up."""

    category = "shape"


class ContractViolation(ShopmatchError):
    """A documented precondition was broken by the caller."""

    category = "contract"


class ParameterError(ShopmatchError):
    """An argument value is outside its allowed range."""

    category = "parameter"


class FormatError(ShopmatchError):
    """An on-disk artifact is malformed. Carries the offending byte offset."""

    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(ShopmatchError):
    """Dataset content is inconsistent (unknown id, label out of range...)."""

    category = "data"


class ConfigError(ShopmatchError):
    """Invalid run configuration or variant/checkpoint mismatch."""

    category = "config"


class TrainingDiverged(ShopmatchError):
    """Loss became non-finite; message pinpoints epoch and batch."""

    category = "divergence"
