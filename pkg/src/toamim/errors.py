"""Exception hierarchy shared by every stage.

Each class carries an ``exit_code`` so the command line can map failures to
distinct process exit statuses.
"""


class ToaMimError(Exception):
    exit_code = 1


class ParameterError(ToaMimError, ValueError):
    exit_code = 2


class ConfigError(ParameterError):
    exit_code = 3


class KindMismatchError(ToaMimError, ValueError):
    """A reflective-band routine was handed a thermal band, or vice versa."""

    exit_code = 4


class DomainError(ToaMimError, ValueError):
    exit_code = 5


class EmptyGranuleError(ToaMimError):
    exit_code = 6


class DegenerateLossError(ToaMimError, ValueError):
    exit_code = 7


class TrainingAbortError(ToaMimError, RuntimeError):
    exit_code = 8


class CorruptStoreError(ToaMimError, IOError):
    exit_code = 9


class MissingArtifactError(ToaMimError, FileNotFoundError):
    """An upstream stage output is absent; the message names the command to run."""

    exit_code = 10


class DegenerateRangeError(ParameterError):
    exit_code = 11
