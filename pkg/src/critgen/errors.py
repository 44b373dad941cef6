"""Exception hierarchy shared across the package."""


class CritgenError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(CritgenError):
    """Input shapes violate a documented contract."""


class NumericOverflowError(CritgenError):
    """A flow transform produced a non-finite intermediate value."""

    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


class TrainingDivergenceError(CritgenError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(CritgenError):
    """Base class for checkpoint load/save failures."""


class CheckpointFormatError(CheckpointError):
    """Checkpoint document is malformed or truncated."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""

    def __init__(self, found: int, expected: int):
        super().__init__(
            f"checkpoint format version {found} is not supported "
            f"(this build reads version {expected})"
        )
        self.found = found
        self.expected = expected


class CheckpointDimensionError(CheckpointError):
    """Checkpoint dimensions are internally inconsistent or do not match the target."""


class BudgetExceededError(CritgenError):
    """A search would exceed its configured query budget cap."""


class ConfigError(CritgenError):
    """Run configuration is missing, malformed, or contains unknown keys."""


class EvaluationError(CritgenError):
    """An evaluation was requested on degenerate or empty inputs."""
