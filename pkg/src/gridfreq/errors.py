"""Exception hierarchy.

The three base classes map onto CLI exit codes: configuration problems (2),
bad or insufficient data (3) and numerical failures (4).
"""


class GridFreqError(Exception):
    exit_code = 1


class ConfigError(GridFreqError, ValueError):
    exit_code = 2


class DataError(GridFreqError, ValueError):
    exit_code = 3


class NumericError(GridFreqError, ArithmeticError):
    exit_code = 4


# moments / simulate
class DegenerateEigenvalues(NumericError):
    """kappa <= 2 tau: the closed-form solution divides by a vanishing gap."""


class NegativeVariance(NumericError):
    pass


class StepTooLarge(ConfigError):
    pass


class EmptySeries(DataError):
    pass


class NonPositiveInput(ConfigError):
    pass


class SeriesTooShort(DataError):
    pass


class TOutOfRange(ConfigError):
    pass


# features
class IrregularTimestamps(DataError):
    pass


class MisalignedIntervals(DataError):
    pass


class MissingCounterpart(UserWarning):
    pass


# nn / train
class DimensionMismatch(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


class ZeroVarianceFeature(UserWarning):
    pass


# baselines
class InsufficientData(DataError):
    pass


class ZeroBenchmark(NumericError):
    pass


# explain
class SingularRegression(NumericError):
    pass


class TooManyFeatures(ConfigError):
    pass
