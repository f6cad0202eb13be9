"""Exception hierarchy shared by all modules."""


class WassDiffError(Exception):
    """Base class."""


class ConfigError(WassDiffError, ValueError):
    pass


class DomainError(WassDiffError, ValueError):
    pass


class DimensionError(WassDiffError, ValueError):
    pass


class StateError(WassDiffError, RuntimeError):
    pass


class ParseError(WassDiffError, ValueError):
    pass


class FormatError(WassDiffError, ValueError):
    pass


class NumericError(WassDiffError, ArithmeticError):
    """Non-finite values appeared; ``step`` says where."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TrainingError(NumericError):
    pass
