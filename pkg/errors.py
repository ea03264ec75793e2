"""Exception hierarchy shared by the training library, the harness and the CLI."""


class WvaError(Exception):
    """Base class for every error raised by this project."""


class InvalidArchitectureError(WvaError):
    pass


class ShapeError(WvaError):
    pass


class InvalidInputError(WvaError):
    pass


class InvariantViolationError(WvaError):
    pass


class ConfigurationError(WvaError):
    pass


class NumericError(WvaError):
    """A non-finite value showed up in a loss or a parameter update.

    ``location`` names the offending parameter, e.g. ``"layer 1 weights[3, 17]"``.
    """

    def __init__(self, message: str, location: str | None = None):
        super().__init__(message if location is None else f"{message} at {location}")
        self.location = location


class DataError(WvaError):
    pass


class DataNotFoundError(DataError):
    def __init__(self, path):
        super().__init__(f"Data file not found: {path}")
        self.path = str(path)


class DataFormatError(DataError):
    def __init__(self, path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = str(path)


class DataConsistencyError(DataError):
    pass


class DataIOError(DataError):
    pass


class ResultsIOError(WvaError):
    pass
