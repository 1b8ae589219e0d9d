"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: configuration problems
exit 2, I/O and file-format problems exit 3, failed checks and diverged
runs exit 1.
"""


class FlowFuseError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowFuseError, ValueError):
    """Tensor rank / channel / spatial dimensions do not match a contract."""


class NonFiniteError(FlowFuseError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class SingularMatrixError(FlowFuseError, ArithmeticError):
    """A channel-mixing matrix is singular or numerically unusable."""


class ConfigError(FlowFuseError, ValueError):
    """Invalid or unknown configuration key/value (CLI exit code 2)."""


class DataError(FlowFuseError, ValueError):
    """Malformed manifest, image file, or checkpoint (CLI exit code 3)."""


class CheckpointError(DataError):
    """Corrupt or version-mismatched checkpoint container."""


class TrainingDiverged(FlowFuseError, ArithmeticError):
    """Loss became non-finite; carries the epoch/batch where it happened."""

    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
