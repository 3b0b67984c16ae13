"""Exception hierarchy shared by every module."""


class HydraError(Exception):
    """Base class for data, model and configuration errors."""


class SampleValidationError(HydraError, ValueError):
    def __init__(self, field, value, reason):
        self.field = field
        self.value = value
        super().__init__(f"{field}={value!r}: {reason}")


class TraceFormatError(HydraError, ValueError):
    """A trace file could not be parsed.  Carries the 1-based line number."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class MissingColumnError(HydraError):
    """A required optional column (power, RAPL) is absent."""


class UndefinedCorrelationError(HydraError, ArithmeticError):
    """Pearson correlation requested on a zero-variance series."""


class ModelFormatError(HydraError, ValueError):
    """A model document has an unknown version or inconsistent shapes."""


class ConfigurationError(HydraError, ValueError):
    pass


class TrainingDataError(HydraError, ValueError):
    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"example {index}: {message}"
        super().__init__(message)


class UnsupportedPlatformError(HydraError):
    pass


class CounterReadError(HydraError):
    def __init__(self, counter, detail=""):
        self.counter = counter
        super().__init__(f"cannot read counter {counter}" + (f": {detail}" if detail else ""))
