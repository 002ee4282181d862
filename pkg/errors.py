"""
Multibin error hierarchy

Library modules raise these; only cli.py turns them into exit codes.
"""

from enum import Enum
from typing import Optional


class ExitCode(Enum):
    """Stable process exit codes"""
    OK = 0
    CONFIG = 2
    DATA = 3
    NUMERIC = 4
    INTERRUPTED = 130


class MultibinError(Exception):
    """Base class for every error raised by the pipeline"""
    exit_code = ExitCode.CONFIG


class UsageError(MultibinError):
    """Violated precondition or bad argument"""


class ShapeError(UsageError):
    """Dimension mismatch between two operands"""

    def __init__(self, what: str, expected: int, actual: int):
        super().__init__(f"{what}: expected length {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class ConfigError(MultibinError):
    """Bad configuration key, value, manifest or missing model"""
    exit_code = ExitCode.CONFIG


class DataError(MultibinError):
    """Missing or unreadable data file"""
    exit_code = ExitCode.DATA


class ParseError(DataError):
    """Malformed binary payload; carries the byte offset of the problem"""

    def __init__(self, message: str, path: str = "", offset: Optional[int] = None):
        where = f" at byte {offset}" if offset is not None else ""
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}{message}{where}")
        self.path = path
        self.offset = offset


class FetchError(DataError):
    """Dataset download failed after all retries"""


class NumericError(MultibinError):
    """NaN or infinite loss / parameters during training"""
    exit_code = ExitCode.NUMERIC


class Interrupted(MultibinError):
    """Run stopped by a signal after finishing in-flight work"""
    exit_code = ExitCode.INTERRUPTED


class TaskFailure(MultibinError):
    """Lower-level failure with the failing binary task attached"""

    def __init__(self, task_id: str, cause: Exception):
        super().__init__(f"task {task_id}: {cause}")
        self.task_id = task_id
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", ExitCode.CONFIG)
