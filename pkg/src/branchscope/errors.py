"""Typed errors raised across the toolkit.

Every error carries the name of the module that raised it so that the CLI can
report where a failure originated.  Errors fall in two families: data errors
(bad inputs, exit code 3) and configuration errors (exit code 2).
"""


class BranchscopeError(Exception):
    module = "branchscope"

    def __init__(self, *args, module=None):
        super().__init__(*args)
        if module is not None:
            self.module = module

    def __str__(self):
        msg = super().__str__()
        return f"[{self.module}] {type(self).__name__}: {msg}"


class DataError(BranchscopeError, ValueError):
    pass


class ConfigError(BranchscopeError, ValueError):
    pass


# dataio
class DataioError(DataError):
    module = "dataio"


class MissingFile(DataioError, FileNotFoundError):
    pass


class SchemaViolation(DataioError):
    pass


class DanglingTensorRef(DataioError):
    pass


class DuplicateSampleId(DataioError):
    pass


class DuplicateComponent(DataioError):
    pass


class NotFound(DataioError, KeyError):
    def __str__(self):
        return BranchscopeError.__str__(self)


class CorruptHeader(DataioError):
    pass


class NonFiniteValue(DataioError):
    pass


class IoFailure(DataioError, OSError):
    pass


# spectral
class SpectralError(DataError):
    module = "spectral"


class DegenerateSampleCount(SpectralError):
    pass


class NotSymmetric(SpectralError):
    pass


class NoConvergence(SpectralError, ArithmeticError):
    pass


class MissingComponent(SpectralError):
    pass


class InconsistentK(SpectralError):
    pass


# gbdt
class GbdtError(DataError):
    module = "gbdt"


class SingleClassDataset(GbdtError):
    pass


class NonFiniteFeature(GbdtError):
    pass


class EmptyDataset(GbdtError):
    pass


class DimensionMismatch(GbdtError):
    pass


# treeshap
class TreeshapError(DataError):
    module = "treeshap"


class MissingCovers(TreeshapError):
    pass


class TooManyFeatures(TreeshapError):
    pass


# attribution
class AttributionError(DataError):
    module = "attribution"


class NoSamplesForAttack(AttributionError):
    pass


class LayoutMismatch(AttributionError):
    pass


class EmptyBlock(AttributionError):
    pass


class LengthMismatch(DataError):
    """Paired sequences differ in length (raised by attribution and evaluation)."""


class DegenerateLength(AttributionError):
    pass


class InsufficientSamples(AttributionError):
    pass


# evaluation
class EvaluationError(DataError):
    module = "evaluation"


class EmptyScores(EvaluationError):
    pass


class ZeroVariance(EvaluationError):
    pass


class EmptyInput(EvaluationError):
    pass


class OutOfRange(EvaluationError):
    pass


# synth / cli
class InvalidConfig(ConfigError):
    module = "synth"


class ConfigInvalid(ConfigError):
    module = "cli"


class UnsupportedAlpha(AttributionError):
    pass


class NonFiniteScore(AttributionError):
    pass
