"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class CapacityError(RuntimeError):
    """Raised when an enumeration would exceed its size bound."""

    def __init__(self, message: str, bound: int):
        super().__init__(message)
        self.bound = bound


class NumericalError(ArithmeticError):
    """A non-finite value appeared. ``index`` names the offending item when known."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ContractViolation(RuntimeError):
    pass


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key
