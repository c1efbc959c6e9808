"""Exception types shared across the package."""


class BimpcError(Exception):
    """Base class for all package-specific errors."""


class NonFinite(BimpcError):
    """An input array contains NaN, or Inf where it is not allowed."""


class DimensionMismatch(BimpcError):
    """Array shapes are inconsistent with each other or with the config."""


class NonPositiveDt(BimpcError):
    """Sampling interval must be strictly positive."""


class SolverFailed(BimpcError):
    """The QP solver returned a non-Solved status."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class DegenerateActiveSet(BimpcError):
    """A constraint is weakly active at the solution; gradients are unreliable."""


class InvalidProtocol(BimpcError):
    """Data-collection protocol parameters are inconsistent."""


class MalformedName(BimpcError):
    """A trial directory or frame filename does not match the naming grammar."""


class ShapeMismatch(BimpcError):
    """Stored data has the wrong element count or frame count."""


class BadMagic(BimpcError):
    """An embedding file does not start with the expected magic/version header."""


class EpisodeOver(BimpcError):
    """world_step was called on a world whose episode already ended."""


class ConfigError(BimpcError):
    """Invalid run/episode configuration."""


class NeverSettled(BimpcError):
    """Opening traces never settled; stability metrics are undefined."""
