"""Exception hierarchy shared across the package."""


class WavecastError(Exception):
    pass


class ShapeError(WavecastError, ValueError):
    """Operand shapes do not conform."""


class ArgumentError(WavecastError, ValueError):
    """An argument is outside its valid domain."""


class ConfigError(WavecastError, ValueError):
    pass


class DataError(WavecastError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedCIFError(DataError):
    """Total generation is zero, so the carbon intensity is undefined."""


class InsufficientDataError(DataError):
    pass


class StateError(WavecastError, RuntimeError):
    """Operation requires state that has not been established (fitted stats, checkpoints)."""


class NumericError(WavecastError, ArithmeticError):
    """Non-finite values appeared during computation."""
