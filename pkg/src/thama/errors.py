"""Exception hierarchy.

Each top-level category maps to one CLI exit code (see ``thama.cli``).
"""


class ThamaError(Exception):
    exit_code = 1


class ConfigError(ThamaError):
    exit_code = 2


class ShapeError(ThamaError, ValueError):
    """A shape rule was violated while building or binding a graph."""

    exit_code = 2


class DataFormatError(ThamaError):
    exit_code = 3


class FramingError(DataFormatError):
    """A binary container is truncated or its records are malformed."""

    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


class CorruptCheckpointError(DataFormatError):
    pass


class SpecMismatchError(DataFormatError):
    pass


class NumericalError(ThamaError):
    exit_code = 4


class NonFiniteError(NumericalError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node
