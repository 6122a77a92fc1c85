"""Exception hierarchy.

Three families map onto CLI exit codes: data problems (2), training
problems (3) and configuration problems (4).
"""


class MlrError(Exception):
    exit_code = 1


class DataError(MlrError):
    exit_code = 2


class TrainingError(MlrError):
    exit_code = 3


class ConfigError(MlrError, ValueError):
    exit_code = 4


# linear algebra / autograd
class NotPositiveDefinite(TrainingError):
    pass


class NonScalarRoot(TrainingError, ValueError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class ShapeMismatch(MlrError, ValueError):
    pass


# model / loss
class NotFinalized(TrainingError):
    pass


class DegenerateClass(TrainingError, ValueError):
    pass


class EmptyEnsemble(TrainingError, ValueError):
    pass


# data
class IoError(DataError):
    pass


class NoHeader(DataError):
    pass


class EmptyTable(DataError):
    pass


class NoUsableFeatures(DataError):
    pass


class SingleClassTarget(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class TooFewSamples(DataError, ValueError):
    pass


# metrics
class ZeroVariance(MlrError, ValueError):
    pass


class SingleClass(MlrError, ValueError):
    pass
