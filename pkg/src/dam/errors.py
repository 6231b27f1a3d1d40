"""Exception types shared across the package."""


class DamError(Exception):
    """Base class for all package errors."""


class DomainError(DamError, ValueError):
    """An argument lies outside the domain of a function."""


class NonFiniteInput(DamError, ValueError):
    """An input contains NaN or infinite values."""


class ZeroVector(DamError, ValueError):
    """A vector with zero norm cannot be projected onto the sphere."""


class DimensionMismatch(DamError, ValueError):
    """Array shapes are inconsistent with each other or with a header."""


class ShapeMismatch(DimensionMismatch):
    """An array cannot be reshaped as requested, e.g. into a square image."""


class EmptyBatch(DamError, ValueError):
    """A computation needs at least one example."""


class EmptyAfterFiltering(DamError, ValueError):
    """Every example was removed by input filtering."""


class AllZeroColumn(DamError, ValueError):
    """A class column of the class weights is zero, so its log-density is -inf."""


class InfeasibleMarginals(DamError, ValueError):
    """Row and column marginals are negative or do not share a total mass."""


class NonPositiveEntry(DamError, ValueError):
    """A matrix that must be strictly positive has a non-positive entry."""


class NotConverged(DamError, RuntimeError):
    """An iterative method stopped before reaching its tolerance."""


class SingularDenominator(DamError, ArithmeticError):
    """A denominator collapsed to zero during an iteration."""


class InvalidState(DamError, ValueError):
    """A saddle-point state has inconsistent shapes or invalid entries."""


class SaturationViolated(DamError, ValueError):
    """Responsibilities are not close enough to one-hot for a closed form."""


class InvalidSplit(DamError, ValueError):
    """A requested split is out of range or exceeds capacity."""


class NumericFailure(DamError, FloatingPointError):
    """Training produced NaN or infinite values."""


class BadMagic(DamError, ValueError):
    """A binary file does not start with the expected magic number."""


class TruncatedFile(DamError, ValueError):
    """A binary file is shorter than its header advertises."""


class VersionMismatch(DamError, ValueError):
    """A checkpoint was written by an incompatible format version."""


class CorruptPayload(DamError, ValueError):
    """A checkpoint payload does not match its header."""
