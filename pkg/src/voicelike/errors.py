"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, divergence 4).
"""


class VoicelikeError(Exception):
    pass


class ConfigError(VoicelikeError, ValueError):
    pass


class DataError(VoicelikeError, ValueError):
    pass


class WavFormatError(DataError):
    """Raised for malformed or unsupported RIFF/WAVE input."""


class FormatError(DataError):
    """Raised for malformed binary feature/codebook/embedding/checkpoint files."""


class TrainingDivergedError(VoicelikeError, RuntimeError):
    pass
