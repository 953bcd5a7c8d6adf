"""Exception types raised across the package."""


class InvrLabError(Exception):
    """Base class for every error raised by invr_lab."""


class InvalidConfig(InvrLabError, ValueError):
    pass


class EmptyHistory(InvrLabError, ValueError):
    pass


class UnknownItem(InvrLabError, KeyError):
    pass


class UnknownId(InvrLabError, KeyError):
    pass


class DimensionMismatch(InvrLabError, ValueError):
    pass


class DuplicateId(InvrLabError, ValueError):
    pass


class EmptyIndex(InvrLabError, ValueError):
    pass


class ZeroTotalExposure(InvrLabError, ValueError):
    pass


class EmptyTreatedSet(InvrLabError, ValueError):
    pass


class InvalidAlpha(InvrLabError, ValueError):
    pass


class ZeroBaseline(InvrLabError, ZeroDivisionError):
    pass


class UnknownVariant(InvrLabError, ValueError):
    pass


class MismatchedRuns(InvrLabError, ValueError):
    pass


class ConfigParse(InvrLabError, ValueError):
    """Configuration text could not be parsed; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
