"""Exception types shared across the pipeline."""


class VQASRError(Exception):
    """Base class for all errors raised by this package."""


class DataError(VQASRError):
    """Input data could not be read or does not satisfy a contract."""


class UnsupportedFormat(DataError):
    pass


class CorruptHeader(DataError):
    pass


class EmptySignal(DataError):
    pass


class DegenerateFilter(VQASRError):
    pass


class TooFewCycles(VQASRError):
    pass


class ZeroAmplitude(VQASRError):
    pass


class TooShort(DataError):
    pass


class ShapeMismatch(VQASRError):
    pass


class TimeMismatch(ShapeMismatch):
    pass


class OddChannels(ShapeMismatch):
    pass


class IndivisibleHeads(ShapeMismatch):
    pass


class InvalidTarget(VQASRError):
    pass


class NumericError(VQASRError):
    """Base for failures that should abort training (exit code 3)."""


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class ManifestMismatch(VQASRError):
    pass


class NoCheckpoints(VQASRError):
    pass


class EmptyReference(VQASRError):
    pass


class ConfigError(VQASRError):
    pass
