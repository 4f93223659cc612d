from typing import List, Optional


class BeasError(Exception):
    """Base class for every error raised by the simulator."""


class RejectedInputError(BeasError, ValueError):
    """Input shape or fingerprint does not match the model spec."""


class NumericError(BeasError, ArithmeticError):
    """Non-finite values produced during a forward/backward pass."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


class ConfigurationError(BeasError, ValueError):
    """A configured bound is violated."""


class ConfigParseError(ConfigurationError):
    """Experiment config file is not well-formed."""

    def __init__(self, path: str, message: str, line: int, column: int):
        super().__init__(f"{path}:{line}:{column}: {message}")
        self.path = path
        self.line = line
        self.column = column


class ConfigValidationError(ConfigurationError):
    """Experiment config violates one or more constraints."""

    def __init__(self, problems: List[str]):
        super().__init__("invalid experiment config:\n  " + "\n  ".join(problems))
        self.problems = problems


class EndorsementError(BeasError):
    """A proposed local block was rejected by the endorsement policy."""

    def __init__(self, reason: str):
        super().__init__(f"endorsement rejected: {reason}")
        self.reason = reason


class DuplicateChannelError(BeasError):
    """A channel with the same id already exists on the network."""


class LedgerFormatError(BeasError):
    """A persisted ledger file could not be decoded."""

    def __init__(self, message: str, block_index: Optional[int] = None):
        super().__init__(message)
        self.block_index = block_index


class MergeAbortedError(BeasError):
    """Every effective aggregation weight was zero."""


class AttackAbortedError(BeasError):
    """An adversarial routine diverged and was abandoned."""


class IngestionError(BeasError):
    """Dataset file could not be parsed."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class MetricsWriteError(BeasError):
    """Metrics or trace file could not be written."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
