"""Exception types shared across the toolkit."""


class QfkError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QfkError):
    """Tensor or graph shapes are inconsistent."""


class GraphError(QfkError):
    """A graph violates a structural precondition."""


class ModelFormatError(QfkError):
    """Base class for .qfk container problems."""


class BadMagicError(ModelFormatError):
    """File does not start with the container magic."""


class VersionMismatchError(ModelFormatError):
    """Container version is not supported."""


class TruncatedBlobError(ModelFormatError):
    """File ends before a declared weight blob does."""


class ChecksumError(ModelFormatError):
    """A weight blob fails its CRC32 check."""


class QuantizationError(QfkError):
    """Invalid quantization parameters or inputs."""


class CalibrationError(QfkError):
    """Calibration set or statistics are unusable."""


class CompileError(QfkError):
    """Plan construction failed."""


class DataError(QfkError):
    """Dataset, label, or result files are inconsistent."""
