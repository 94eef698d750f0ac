"""Exception types shared across the package."""


class InvalidInput(ValueError):
    pass


class InvalidShape(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class CapacityExceeded(ValueError):
    """Raised when an exact solver is asked for more points than its cap."""


class Diagnostic(FloatingPointError):
    """A non-finite value appeared inside a computation."""


class FormatError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class DegenerateScan(RuntimeError):
    pass
