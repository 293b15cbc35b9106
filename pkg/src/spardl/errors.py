"""Exception hierarchy shared by every module."""


class SparDLError(Exception):
    pass


class InvalidPartition(SparDLError, ValueError):
    pass


class BlockMismatch(SparDLError, ValueError):
    pass


class ScheduleViolation(SparDLError):
    """A round plan addressed the same worker twice (a schedule bug)."""


class InvalidGroup(SparDLError, ValueError):
    pass


class UnsupportedGroupSize(SparDLError, ValueError):
    pass


class InvalidK(SparDLError, ValueError):
    pass


class ConfigError(SparDLError, ValueError):
    pass


class DimensionMismatch(SparDLError, ValueError):
    pass


class ResidualStateError(SparDLError):
    pass


class TheoremViolation(SparDLError, AssertionError):
    """A received bag holds a block the receiver no longer owns."""


class ConsistencyError(SparDLError, AssertionError):
    """Workers ended a synchronization with different results."""
