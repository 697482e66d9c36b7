"""
Exception hierarchy for the forecasting pipeline.
Every error carries the process exit code the CLI maps it to.
"""


class PfrpError(Exception):
    """Base class for all pipeline errors"""
    exit_code = 1


class ConfigError(PfrpError, ValueError):
    """Invalid configuration, usage or missing input path"""
    exit_code = 2


class DataError(PfrpError, ValueError):
    """Input data violates a contract (non-finite values, short splits, ...)"""
    exit_code = 3


class ShapeError(DataError):
    """Array dimensions do not match what a model or bank expects"""


class BankFormatError(DataError):
    """Memory bank file has the wrong magic bytes or version"""


class ChecksumError(BankFormatError):
    """Memory bank file failed its CRC32 check (corrupt or truncated)"""


class StaleCacheError(PfrpError, RuntimeError):
    """A forward cache was used after the model it came from was updated"""


class NumericError(PfrpError, ArithmeticError):
    """A loss or prediction became non-finite"""
    exit_code = 4


class StageError(PfrpError):
    """Failure inside one stage of the retrieval forward pass"""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", PfrpError.exit_code)
