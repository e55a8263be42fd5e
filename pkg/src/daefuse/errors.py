"""Exception hierarchy shared across the package.

Every failure category raised by public operations maps to one class here,
so callers (and the CLI exit-code mapping) can dispatch on type alone.
"""


class DaeFuseError(Exception):
    """Base class for all package errors."""

    category = "error"


class NotFoundError(DaeFuseError):
    """A required file or directory does not exist."""

    category = "not_found"


class UnsupportedFormatError(DaeFuseError):
    """Raster file exists but cannot be decoded into a supported image mode."""

    category = "unsupported_format"


class InvalidImageError(DaeFuseError):
    """Decoded image violates the image invariants (e.g. zero area)."""

    category = "invalid_image"


class PairingError(DaeFuseError):
    """Dataset sides do not match up file-by-file."""

    category = "pairing"


class RegistrationError(DaeFuseError):
    """Paired images (or video frames) do not share identical dimensions."""

    category = "registration"


class CropError(DaeFuseError):
    """Image smaller than the requested crop size."""

    category = "crop"


class EmptyDatasetError(DaeFuseError):
    """No usable samples were found."""

    category = "empty_dataset"


class ShapeError(DaeFuseError):
    """Tensor shapes are incompatible with the requested operation."""

    category = "shape"


class DomainError(DaeFuseError):
    """Scalar input outside its mathematical domain (e.g. score not in (0,1))."""

    category = "domain"


class DegenerateInputError(DaeFuseError):
    """Input is degenerate for the statistic (zero variance, too small, ...)."""

    category = "degenerate_input"


class NumericalError(DaeFuseError):
    """Non-finite values appeared where finite ones are required.

    ``last_checkpoint`` points at the most recent good checkpoint when the
    trainer aborts mid-run, so the run can be resumed after investigation.
    """

    category = "numerical"

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class PhaseOrderError(DaeFuseError):
    """Operation requires a checkpoint from a training phase that has not run."""

    category = "phase_order"
