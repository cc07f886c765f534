"""Exception hierarchy shared by all modules."""


class RMPCError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RMPCError, ValueError):
    pass


class RangeError(RMPCError, ValueError):
    pass


class ConfigError(RMPCError, ValueError):
    pass


class EmptySetError(RMPCError):
    pass


class UnboundedError(RMPCError):
    pass


class StabilityError(RMPCError):
    pass


class NonConvergenceError(RMPCError):
    pass


class BadProblemError(RMPCError, ValueError):
    pass


class InitializationError(RMPCError):
    """Raised when the full-horizon problem is infeasible at t = 0."""


class InvariantViolation(RMPCError):
    """A guarantee that should hold by construction was observed to fail."""


class DegenerateHullError(RMPCError):
    pass
