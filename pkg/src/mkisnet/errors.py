"""Exception hierarchy shared by every mkisnet module."""


class MkisError(Exception):
    """Base class for all library errors."""


class ShapeError(MkisError, ValueError):
    """Operand shapes disagree; the message names the offending axes."""


class GeometryError(MkisError, ValueError):
    """Convolution geometry yields an empty output or the input size is not decodable."""


class ParameterError(MkisError, ValueError):
    pass


class DegenerateBatchError(MkisError, ValueError):
    """Batch statistics requested over a single element per channel."""


class LabelError(MkisError, ValueError):
    pass


class EmptyLossError(MkisError, ValueError):
    pass


class NonFiniteError(MkisError, FloatingPointError):
    """A NaN or Inf appeared in a forward value, gradient or loss."""

    def __init__(self, message, *, name=None, step=None):
        super().__init__(message)
        self.name = name
        self.step = step


class ConfigError(MkisError, ValueError):
    pass


class ModelFileError(MkisError):
    pass


class VersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class TruncatedFileError(ModelFileError):
    pass


class DataError(MkisError):
    pass


class ManifestError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DecodeError(DataError):
    pass


class MissingClassError(DataError, ValueError):
    pass
