"""Exception hierarchy. Each family maps to a stable CLI exit code."""


class FitError(Exception):
    exit_code = 1


class InputError(FitError):
    """Bad input data, configuration, or arguments."""

    exit_code = 2


class EmptyDatasetError(InputError):
    pass


class DimensionError(InputError):
    pass


class NumericError(FitError, ArithmeticError):
    """A computation produced NaN/Inf or training diverged."""

    exit_code = 3


class TrainingDivergedError(NumericError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ArtifactMismatchError(FitError):
    """A saved artifact does not agree with the data or format it is used with."""

    exit_code = 4


class VocabMismatchError(ArtifactMismatchError):
    pass


class CheckpointError(ArtifactMismatchError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointStructureError(CheckpointError):
    pass
