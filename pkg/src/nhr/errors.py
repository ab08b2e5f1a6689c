"""Exception hierarchy shared by every nhr module."""


class NHRError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(NHRError, ValueError):
    exit_code = 2


class ShapeError(NHRError, ValueError):
    exit_code = 2


class DataError(NHRError, ValueError):
    """Malformed or inconsistent input data (parse errors, empty logs, bad ids)."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class IdLookupError(DataError, IndexError):
    pass


class SamplingError(DataError):
    """A sampling request cannot be satisfied (e.g. a user has no eligible negatives)."""


class CheckpointError(DataError):
    pass


class StaleArtifactError(DataError):
    pass


class StateError(NHRError, RuntimeError):
    exit_code = 1


class TrainingError(NHRError, RuntimeError):
    exit_code = 1


class ProtocolError(NHRError):
    """Evaluation protocol violated (missing candidates, test item absent)."""

    exit_code = 4
