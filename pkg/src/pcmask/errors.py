"""Exception types shared across the package."""


class PCMaskError(Exception):
    """Base class; ``code`` is the short machine-readable tag the CLI prints."""

    code = "error"


class ShapeError(PCMaskError, ValueError):
    code = "shape"


class ModeError(PCMaskError, ValueError):
    code = "mode"


class NumericError(PCMaskError, ArithmeticError):
    code = "numeric"

    def __init__(self, message, layer=None, epoch=None, batch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch
        self.batch = batch


class DegenerateGridError(PCMaskError, ValueError):
    code = "degenerate-grid"


class DataError(PCMaskError, ValueError):
    code = "data"


class ParseError(DataError):
    code = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(PCMaskError, ValueError):
    code = "format"


class UsageError(PCMaskError, ValueError):
    code = "usage"
