"""
Error types shared by the engine, the services and the outer surfaces.

Every error carries the process exit code the CLI maps it to.
"""

from typing import Sequence

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class BPDepthError(Exception):
    exit_code: int = EXIT_DATA


class ShapeError(BPDepthError, ValueError):
    """Operands of an op do not conform."""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int], detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: shape mismatch {self.left} vs {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ConfigError(BPDepthError, ValueError):
    exit_code = EXIT_DATA


class DataError(BPDepthError, ValueError):
    exit_code = EXIT_DATA


class NumericError(BPDepthError, ArithmeticError):
    exit_code = EXIT_NUMERIC
