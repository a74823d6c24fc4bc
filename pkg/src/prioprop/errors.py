"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed external input (edge lists, dataset files, ids out of range)."""

    def __init__(self, message, path=None, line=None):
        ctx = ""
        if path is not None:
            ctx += f" [{path}"
            ctx += f":{line}]" if line is not None else "]"
        elif line is not None:
            ctx += f" [line {line}]"
        super().__init__(message + ctx)
        self.path = path
        self.line = line


class ShapeError(ValueError):
    """Contract violation: operands with incompatible shapes or an empty mask."""


class NumericalError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class ConfigError(ValueError):
    """Invalid experiment or model configuration."""
