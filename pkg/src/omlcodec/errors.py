"""Exception types shared across the package."""


class CodecError(Exception):
    """Base class for all package errors."""


class ConfigError(CodecError):
    """Invalid or unknown configuration keys/values."""


class ShapeError(CodecError):
    """Tensor shape or dimension mismatch."""


class DataError(CodecError):
    """Missing or unusable input data (empty dataset, empty directory)."""


class NumericalError(CodecError):
    """Non-finite loss/gradient or training divergence."""


class FormatError(CodecError):
    """Base class for bitstream/checkpoint format errors."""


class BadMagicError(FormatError):
    """Container does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """Container version is not supported."""


class TruncatedError(FormatError):
    """Container or payload ends before the declared content."""


class ChecksumMismatchError(FormatError):
    """Model checksum recorded in the container does not match the model."""
