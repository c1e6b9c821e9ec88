"""Exception types shared across the package."""


class ReconError(Exception):
    """Base class for all package errors."""


class ShapeError(ReconError, ValueError):
    """Operand shapes do not match the operation's contract."""


class ConfigError(ReconError, ValueError):
    """Invalid configuration value (sizes, rates, kernel extents, keys)."""


class ContractError(ReconError, ValueError):
    """A precondition of an operation was violated at call time."""


class FormatError(ReconError):
    """A binary container could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(ReconError, RuntimeError):
    """Training diverged (non-finite loss) or could not proceed."""
