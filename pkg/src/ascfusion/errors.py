"""Exception hierarchy shared by all modules.

The CLI maps these to exit codes, so raise the most specific one.
"""


class AscError(Exception):
    exit_code = 1


class ConfigError(AscError, ValueError):
    exit_code = 2


class DataError(AscError, ValueError):
    exit_code = 3


class ManifestParseError(DataError):
    pass


class LabelError(DataError):
    pass


class LeakageError(DataError):
    """A test item reached a fit step."""


class MissingArtifactError(DataError):
    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path}; run `{producer}` first")
        self.path = path
        self.producer = producer


class NotFittedError(AscError, RuntimeError):
    pass


class NumericError(AscError, ArithmeticError):
    exit_code = 4
