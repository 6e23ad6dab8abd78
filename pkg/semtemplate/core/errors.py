from typing import Any, Dict, Optional


class PdcError(Exception):
    """Base class for all errors raised by the package"""


class ConfigurationError(PdcError, ValueError):
    """Dimension, layout or configuration mismatch"""


class DomainError(PdcError, ValueError):
    """Input outside the domain of an operation (empty sets, zero denominators, ...)"""


class UnsupportedPrimitiveError(PdcError, TypeError):
    """Expression uses an operation the tape cannot differentiate"""


class DataFormatError(PdcError, ValueError):
    """Malformed shape, keypoint, label or config file"""


class CheckpointError(DataFormatError):
    """Checkpoint magic, version or checksum mismatch"""


class NumericalError(PdcError, ArithmeticError):
    """Non-finite loss or gradient"""

    def __init__(self, message: str, breakdown: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.breakdown = breakdown or {}


class TrainingAborted(NumericalError):
    """Training stopped on a non-finite loss; carries the last good parameters"""

    def __init__(
        self,
        message: str,
        breakdown: Optional[Dict[str, float]] = None,
        last_good: Any = None,
        step: int = 0,
    ):
        super().__init__(message, breakdown)
        self.last_good = last_good
        self.step = step
