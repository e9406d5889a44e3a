"""Exception hierarchy. The CLI maps each class to an exit code."""


class FlatError(Exception):
    exit_code = 1


class CheckpointError(FlatError):
    """Missing files, shape mismatches, non-finite tensors, I/O failures."""

    exit_code = 3


class NumericalError(FlatError):
    """Corrupted statistics or an ill-posed decomposition."""

    exit_code = 4
