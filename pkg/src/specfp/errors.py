"""Exception types shared across the toolkit."""


class ParseError(ValueError):
    """Malformed input text (bad CSV row, bad header, bad config line)."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """Well-formed input that violates a contract (range, shape, ordering)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
