"""Exception types shared across the toolkit."""


class PegkitError(Exception):
    """Base class for all toolkit errors."""


class Unreachable(PegkitError):
    """Requested pose lies outside the manipulator workspace."""


class DegenerateWrist(PegkitError):
    """Wrist extraction hit an arcsine argument outside [-1, 1]."""


class NonPositiveDuration(PegkitError):
    """Segment duration must be strictly positive."""


class Infeasible(PegkitError):
    """No solution satisfies the requested limits/constraints."""


class SolverFailure(PegkitError):
    """Underlying QP solver did not return a usable solution."""


class NonDivisibleInterval(PegkitError):
    """Planner interval is not an integer multiple of the controller period."""


class Degenerate(PegkitError):
    """Input geometry is rank-deficient (e.g. < 3 non-collinear points)."""


class NoFeasibleGrasp(PegkitError):
    """Every candidate grasp is excluded or unreachable."""


class EmptyInput(PegkitError):
    """An input series/point set is empty where data is required."""


class TooShort(PegkitError):
    """Input series is too short for the requested operation."""


class Diverged(PegkitError):
    """Iterative procedure exceeded its iteration budget without converging."""


class ConfigError(PegkitError):
    """Configuration file is malformed, has unknown keys, or bad values."""
