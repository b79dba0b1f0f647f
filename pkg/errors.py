"""Typed failures raised across the codec, and the CLI exit code each maps to."""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CORRUPTION = 3
EXIT_NUMERIC = 4


class CodecError(Exception):
    exit_code = EXIT_NUMERIC


class ShapeError(CodecError):
    def __init__(self, message: str, dimension: str | None = None):
        self.dimension = dimension
        if dimension is not None:
            message = f"{message} (dimension: {dimension})"
        super().__init__(message)


class DomainError(CodecError):
    pass


class InvariantError(CodecError):
    pass


class ConfigError(CodecError):
    exit_code = EXIT_USAGE


class NumericError(CodecError):
    def __init__(self, message: str, parameter: str | None = None):
        self.parameter = parameter
        if parameter is not None:
            message = f"{message} [parameter={parameter}]"
        super().__init__(message)


# ── Corruption family: every container / stream failure is distinguishable ──
class CorruptionError(CodecError):
    exit_code = EXIT_CORRUPTION


class MagicError(CorruptionError):
    pass


class VersionError(CorruptionError):
    pass


class CrcError(CorruptionError):
    pass


class HashMismatchError(CorruptionError):
    pass


class TruncatedStreamError(CorruptionError):
    pass


class EscapeRangeError(CorruptionError):
    """Symbol too large for the 16-bit escape payload."""


class CorpusError(ConfigError):
    """Missing or empty corpus directory."""
