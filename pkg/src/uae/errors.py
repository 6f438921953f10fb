"""Exception hierarchy shared by every module in the package."""


class UAEError(Exception):
    """Base class; the CLI maps it to exit code 2."""


class NonPositiveDefinite(UAEError):
    pass


class DimensionMismatch(UAEError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class LengthMismatch(DimensionMismatch):
    pass


class InvalidKappa(UAEError, ValueError):
    pass


class InvalidSelection(UAEError, ValueError):
    pass


class EmptyInput(UAEError, ValueError):
    pass


class NoConvergence(UAEError):
    pass


class NonScalarRoot(UAEError, ValueError):
    pass


class DegenerateVariance(UAEError, ValueError):
    pass


class InconsistentSpec(UAEError, ValueError):
    pass


class ZeroVector(UAEError, ValueError):
    pass


class TooFewPoints(UAEError, ValueError):
    pass


class TooFewRepetitions(UAEError, ValueError):
    pass


class TooFewSamples(UAEError, ValueError):
    pass


class BadMagic(UAEError):
    pass


class TruncatedFile(UAEError):
    pass


class IncompatibleCheckpoint(UAEError):
    pass


class ConfigError(UAEError):
    pass


class DegenerateInterpolation(UAEError, ValueError):
    pass


class IoError(UAEError, OSError):
    pass
