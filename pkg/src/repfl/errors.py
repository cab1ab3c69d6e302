"""Exception hierarchy shared across the package."""


class RepflError(Exception):
    """Base class for all package errors."""


class ShapeError(RepflError, ValueError):
    pass


class ContractError(RepflError, RuntimeError):
    pass


class NumericError(RepflError, ArithmeticError):
    """Non-finite values appeared during training.

    ``client`` and ``batch`` identify where it happened, when known.
    """

    def __init__(self, message, client=None, batch=None):
        super().__init__(message)
        self.client = client
        self.batch = batch


class DataError(RepflError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PartitionError(RepflError, RuntimeError):
    pass


class ConfigError(RepflError, ValueError):
    pass


class CheckpointError(RepflError, IOError):
    pass
