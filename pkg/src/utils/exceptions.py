"""
Error Types
"""


class HCVTError(Exception):
    """Base class for every error raised by this package"""


class ContractViolation(HCVTError, ValueError):
    """A caller broke an operation's precondition"""


class ConfigError(HCVTError, ValueError):
    """Invalid configuration: unknown keys, bad variant, impossible shapes"""


class DataFormatError(HCVTError, IOError):
    """On-disk artifact is missing, corrupt or in an unsupported format"""


class RecordValidationError(DataFormatError):
    """A clinical CSV row failed validation"""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UndefinedMetricError(HCVTError, ValueError):
    """Metric cannot be computed for the given labels"""


class TrainingAborted(HCVTError, RuntimeError):
    """Training stopped on a non-finite loss"""

    def __init__(self, message, fold=None, epoch=None, batch_index=None, lr=None):
        super().__init__(message)
        self.fold = fold
        self.epoch = epoch
        self.batch_index = batch_index
        self.lr = lr


class OutputExistsError(HCVTError, FileExistsError):
    """Refusing to write into a non-empty output directory"""
