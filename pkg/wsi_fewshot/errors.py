"""
Error Types Module
Few-Shot Slide Classification Pipeline

Every failure raised by the toolkit derives from FewShotError. The CLI maps
the three concrete families onto its exit codes.
"""


class FewShotError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class DataFormatError(FewShotError, ValueError):
    """Malformed input file, invalid task or inconsistent labels.

    Args:
        message (str): One-line description of the problem
        offset (int, optional): Byte offset inside a binary file
        line (int, optional): 1-based line number inside a text file
    """

    exit_code = 2

    def __init__(self, message, offset=None, line=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class NumericalError(FewShotError, ArithmeticError):
    """Cholesky failure, non-convergence or non-finite intermediate values."""

    exit_code = 3

    def __init__(self, message, residual=None, class_id=None, position=None):
        if class_id is not None:
            message = f"class {class_id}: {message}"
        super().__init__(message)
        self.residual = residual
        self.class_id = class_id
        self.position = position


class ConfigError(FewShotError, ValueError):
    """Unknown configuration key or invalid flag value."""

    exit_code = 1
