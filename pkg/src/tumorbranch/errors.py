"""Exception hierarchy for tumorbranch.

Every error raised by this package derives from :class:`TumorBranchError`,
split into input/validation problems (``ValueError`` family) and numerical
failures (``ArithmeticError`` family) so callers can map them onto the
CLI exit-code contract (2 = bad input, 3 = numerical failure).
"""


class TumorBranchError(Exception):
    """Base class for all package errors."""


# --- input / validation errors -------------------------------------------

class InvalidParameter(TumorBranchError, ValueError):
    """A builder or operation argument is outside its admissible range."""


class NegativeRate(InvalidParameter):
    """A transition rate is negative (or not finite)."""


class EmptyChain(InvalidParameter):
    """A chain was requested with no non-absorbing state."""


class ReducibleChain(InvalidParameter):
    """The support graph on the non-absorbing states is not strongly connected."""


class NotBirthDeath(InvalidParameter):
    """An operation requiring tridiagonal (birth-death) support got something else."""


class DimensionMismatch(InvalidParameter):
    """Vector/matrix sizes passed to an operation do not agree."""


class NonpositiveV(InvalidParameter):
    """A Lyapunov function must be strictly positive on the non-absorbing states."""


class ExtinctPopulation(TumorBranchError, ValueError):
    """A simulation step was requested from an empty population."""


class ConfigError(TumorBranchError, ValueError):
    """An experiment configuration file is malformed or inconsistent."""


# --- numerical failures ----------------------------------------------------

class NumericalFailure(TumorBranchError, ArithmeticError):
    """Base class for runtime numerical failures."""


class SingularSystem(NumericalFailure):
    """A linear system was numerically singular (typically: no absorption)."""


class ToleranceUnachievable(NumericalFailure):
    """An iteration/series cap was hit before the requested tolerance."""


class NoConvergence(NumericalFailure):
    """A fixed-point or eigen iteration did not converge within its step budget."""


class IdentityViolation(NumericalFailure):
    """Two constructions that must agree exactly disagreed; signals a bug."""
