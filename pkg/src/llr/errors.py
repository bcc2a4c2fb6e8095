"""Exception types shared across the package."""


class LLRError(Exception):
    """Base class for all package errors."""


class ShapeError(LLRError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        names = " vs ".join(str(list(s)) for s in self.shapes)
        msg = f"{op}: incompatible shapes {names}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(LLRError, ValueError):
    """A precondition of an operation was violated."""


class NumericalError(LLRError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class FormatError(LLRError, ValueError):
    """A file does not follow its documented binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(LLRError, ValueError):
    """A configuration file or override is malformed."""
