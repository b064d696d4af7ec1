"""Exception hierarchy for the lab.

Every failure mode that an experiment can hit maps to one class here so the
CLI can translate it into a stable exit code.
"""


class ExtremalLabError(Exception):
    """Base class for all lab-specific failures."""


class ConfigError(ExtremalLabError):
    """Malformed or contradictory experiment configuration."""


class ZeroOperator(ExtremalLabError):
    """Operator is identically zero and cannot be normalized."""


class NonInjective(ExtremalLabError):
    """Operator fails the injectivity surrogate (a zero singular value / weight)."""


class DimensionMismatch(ExtremalLabError):
    """Operands live in spaces of different dimension."""


class ZeroVector(ExtremalLabError):
    """A nonzero vector was required."""


class SolveFailure(ExtremalLabError):
    """Linear solve lost too much accuracy; raise mantissa_bits and retry."""


class Unattainable(ExtremalLabError):
    """Requested residual is below the infimum over all scales.

    Carries the infimum so callers can report how far out of reach the
    target was.
    """

    def __init__(self, infimum, target=None):
        self.infimum = infimum
        self.target = target
        super().__init__(f"target residual {target} below attainable infimum {infimum}")


class Infeasible(ExtremalLabError):
    """Oracle feasible set is empty at the requested distance."""


class Degenerate(ExtremalLabError):
    """Step directions too close to dependent; switch to the fallback path."""

    def __init__(self, measure, threshold):
        self.measure = measure
        self.threshold = threshold
        super().__init__(f"independence measure {measure} below threshold {threshold}")


class LineSearchFail(ExtremalLabError):
    """No step scale in the allowed range achieved the required decrease."""


class NotDegenerate(ExtremalLabError):
    """Fallback solve found a large residual: the main step path should have worked."""

    def __init__(self, residual, threshold):
        self.residual = residual
        self.threshold = threshold
        super().__init__(f"fallback residual {residual} above {threshold}; not a degenerate instance")


class ScanExhausted(ExtremalLabError):
    """Startup scan found no grid point under the threshold.

    ``growth`` records (eps, coefficient-norm) pairs over the scanned band,
    the evidence that the minimal norms stayed bounded.
    """

    def __init__(self, growth, threshold):
        self.growth = growth
        self.threshold = threshold
        super().__init__(f"no scan point reached threshold {threshold}")


class EmptyProbeSet(ExtremalLabError):
    """Type classification needs at least one admissible probe."""


class RankDeficient(ExtremalLabError):
    """Krylov vectors became dependent before the requested rank.

    The achieved rank itself certifies an exactly invariant subspace.
    """

    def __init__(self, achieved_rank):
        self.achieved_rank = achieved_rank
        super().__init__(f"Krylov set dependent at rank {achieved_rank}")


class DecompositionFailure(ExtremalLabError):
    """Schur decomposition did not converge or failed verification."""
