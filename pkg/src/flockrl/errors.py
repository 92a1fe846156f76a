"""Exception types shared across the package."""


class FlockRLError(Exception):
    """Base class for all package errors."""


class InvalidConfigurationError(FlockRLError, ValueError):
    pass


class DimensionError(FlockRLError, ValueError):
    pass


class NumericError(FlockRLError, ArithmeticError):
    pass


class CorruptCheckpointError(FlockRLError):
    pass


class CorruptFileError(FlockRLError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContractViolationError(FlockRLError, RuntimeError):
    pass


class EnvironmentGenerationError(FlockRLError):
    pass


class EmptyBufferError(FlockRLError):
    pass


class CalibrationError(FlockRLError):
    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = curve or []


class ComparisonRefusedError(FlockRLError):
    pass
