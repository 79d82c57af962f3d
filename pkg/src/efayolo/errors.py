"""Exception hierarchy shared by every module."""


class EfaError(Exception):
    """Base class for all domain errors raised by efayolo."""


class DimensionError(EfaError, ValueError):
    """Tensor shapes do not line up for the requested operation."""

    def __init__(self, op, message, shapes=()):
        self.op = op
        self.shapes = tuple(shapes)
        detail = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if self.shapes else ""
        super().__init__(f"{op}: {message}{detail}")


class GeometryError(EfaError, ValueError):
    """A window/stride/padding combination yields an empty or invalid output."""


class ConfigError(EfaError, ValueError):
    """Invalid model or block configuration.

    ``line`` is set when the error comes from parsing a config file.
    """

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class NumericError(EfaError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class InputError(EfaError, ValueError):
    """Malformed user-level input (ground truth, image ids, ...)."""


class FormatError(EfaError, ValueError):
    """Binary/text file format violation at a known byte offset.

    ``kind`` is a short stable identifier such as ``"bad-magic"`` or
    ``"truncated"`` so callers can branch without parsing messages.
    """

    def __init__(self, kind, message, offset=None):
        self.kind = kind
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{kind}{where}: {message}")
