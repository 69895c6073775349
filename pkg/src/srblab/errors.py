"""Exception types shared across the package.

The distinction matters for the command-line pipelines, which map these to
exit codes: config errors -> 2, hypothesis violations -> 3, numerical
failures -> 4.  Plain precondition violations raise ValueError.
"""


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class HypothesisViolation(Exception):
    """Input data fails a stated hypothesis of the result being tested.

    Raised when an experiment *ran* but the mathematical hypothesis it was
    supposed to exercise does not hold on the supplied data (e.g. a sequence
    whose average is below the required floor, or an exponent estimate below
    the block rate).
    """


class NumericalError(RuntimeError):
    """Numerical procedure failed: overflow, non-convergence, orbit escape."""


class DominationRefuted(NumericalError):
    """No admissible (C, lambda) certifies the requested domination."""
