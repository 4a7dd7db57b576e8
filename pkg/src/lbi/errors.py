"""Exception types shared across the package.

Every error raised by library code derives from LbiError so callers can
catch the whole family, while the subclasses keep the failure kinds
distinguishable (shape problems vs. bad data vs. bad configuration vs.
numerical breakdown of a run).
"""


class LbiError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LbiError, ValueError):
    """Operands have incompatible dimensions."""


class DataError(LbiError, ValueError):
    """Input data violates a contract (bad ids, malformed records, ...)."""


class ConfigError(LbiError, ValueError):
    """A configuration value is out of its permitted range."""


class ContractError(LbiError, ValueError):
    """A caller-supplied callable or argument broke an API contract."""


class NumericError(LbiError, ArithmeticError):
    """A computation produced non-finite values.

    ``context`` names the offending step.
    """

    def __init__(self, message: str, context: str | None = None):
        super().__init__(message if context is None else f"{message} (step: {context})")
        self.context = context


class RunError(LbiError, RuntimeError):
    """A training run failed; ``epoch`` is the epoch index when known."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class ParseError(DataError):
    """A file could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
