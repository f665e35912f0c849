"""Exception taxonomy shared across the package.

Every error a caller is expected to branch on gets its own class; HTTP and
CLI layers map these to stable machine-readable codes.
"""


class MuzzleIdError(Exception):
    """Base class for all package errors."""


class SpecError(MuzzleIdError):
    """A structural precondition was violated (shapes, ranges, config)."""


class NumericError(MuzzleIdError):
    """A computation produced non-finite values."""


class DataError(MuzzleIdError):
    """Input data is missing, degenerate, or inconsistent."""


class EmptyImage(SpecError):
    """Zero-sized image where pixels are required."""


class TooSmall(SpecError):
    """Image smaller than the operator's minimum support."""


class EmptyCrop(SpecError):
    """Crop rectangle does not intersect the image."""


class RefuseOverwrite(MuzzleIdError):
    """Refusing to write into an existing non-empty output directory."""


class EmptyDataset(DataError):
    """Dataset manifest contains no identities."""


class ModelError(MuzzleIdError):
    """A trained model was required but is absent or unusable."""


class InsufficientPairs(DataError):
    """No threshold can reach the requested false-accept rate."""


class FormatError(MuzzleIdError):
    """A persisted file is malformed."""


class DecodeError(FormatError):
    """Image bytes could not be decoded as PNG or JPEG."""


class CheckpointVersionError(FormatError):
    """Checkpoint container version is not supported."""


class TruncatedCheckpoint(FormatError):
    """Checkpoint file ends before the declared payload."""


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


class DuplicateId(MuzzleIdError):
    """Enrollment id already present in the gallery."""


class NotEnrolled(MuzzleIdError):
    """Claimed id is not present in the gallery."""


class EmptyGallery(MuzzleIdError):
    """Operation requires at least one enrolled record."""
