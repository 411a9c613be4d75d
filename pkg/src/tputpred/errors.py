"""Exception types raised across the package."""


class TraceParseError(ValueError):
    """A trace CSV row could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TraceValidationError(ValueError):
    """Parsed trace data violates a SessionTrace invariant."""


class DegenerateFitError(ValueError):
    """Training data cannot identify the requested model."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


class InfeasibleTraceError(ValueError):
    """The trace is too short to play a single chunk."""
