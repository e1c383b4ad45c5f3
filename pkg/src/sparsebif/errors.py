"""Exception hierarchy shared by all modules."""


class SparseBifError(Exception):
    pass


class InvalidInput(SparseBifError, ValueError):
    pass


class OutOfRange(SparseBifError, ValueError):
    pass


class NumericalFailure(SparseBifError, ArithmeticError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class DivergedTrajectory(SparseBifError, ArithmeticError):
    """Raised when an integrator produces a non-finite state.

    ``last_valid`` is the index of the last finite row and ``partial`` holds
    rows ``0..last_valid``.
    """

    def __init__(self, message, last_valid, partial=None):
        super().__init__(message)
        self.last_valid = last_valid
        self.partial = partial


class ConfigError(SparseBifError, ValueError):
    pass


class FormatError(SparseBifError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(SparseBifError, ValueError):
    pass
