"""Exception types shared across dpkit."""


class DpkitError(Exception):
    """Base class for all toolkit errors."""


class InfinitePrivacyLoss(DpkitError, ValueError):
    """Raised when a mechanism adds no noise, so its privacy loss is unbounded."""


class CalibrationError(DpkitError, RuntimeError):
    """No noise multiplier in the search range meets the requested budget."""


class ShapeError(DpkitError, ValueError):
    pass


class LabelError(DpkitError, ValueError):
    pass


class ConfigError(DpkitError, ValueError):
    pass


class DataError(DpkitError, ValueError):
    pass


class CorruptDataError(DataError):
    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class ParseError(DpkitError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConvergenceWarning(UserWarning):
    pass
