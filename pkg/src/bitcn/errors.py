"""Exception hierarchy shared across the package."""


class BiTCNError(Exception):
    pass


class ShapeError(BiTCNError, ValueError):
    pass


class NumericalError(BiTCNError, ArithmeticError):
    """A NaN or Inf surfaced in a forward value, a gradient or a loss."""


class OutOfVocabularyError(BiTCNError, IndexError):
    pass


class DataError(BiTCNError):
    pass


class CheckpointError(BiTCNError):
    pass


class ConfigError(BiTCNError):
    pass
