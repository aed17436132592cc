"""Exception types raised by ampgan.

Every error carries the process exit code the CLI should use for it.
"""

USAGE_ERROR = 1
DATA_ERROR = 2
NUMERICAL_FAILURE = 3


class AmpGanError(Exception):
    exit_code = DATA_ERROR


class AudioFormatError(AmpGanError):
    """Unreadable WAV, unsupported encoding, or zero-length audio."""


class SilentAudioError(AmpGanError):
    """Nothing in the buffer rises above the silence threshold."""


class ManifestError(AmpGanError):
    pass


class SilentTargetError(ManifestError, ValueError):
    """A target with no energy where a ratio against it is needed."""


class CheckpointError(AmpGanError):
    pass


class ConfigError(AmpGanError):
    exit_code = USAGE_ERROR


class NumericalError(AmpGanError):
    exit_code = NUMERICAL_FAILURE
