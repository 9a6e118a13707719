"""Exception types raised across the package.

Everything derives from :class:`FableError` so callers can catch one type
at the boundary (the CLI does exactly that and turns it into an error
record on stderr).
"""

from __future__ import annotations


class FableError(Exception):
    """Base class for all errors raised by this package."""


class NonFinite(FableError):
    """Input array contains NaN or infinity."""


class TooFewRows(FableError):
    """Operation needs more rows than the input provides."""


class DimensionMismatch(FableError):
    """Shapes of two inputs are incompatible."""


class RankOutOfRange(FableError):
    """Requested rank k is outside [1, min(n, p)]."""


class NonPositiveDiag(FableError):
    """Diagonal of a covariance must be strictly positive."""


class ConvergenceFailure(FableError):
    """Iterative routine hit its iteration cap before meeting tolerance."""


class AllZeroSpectrum(FableError):
    """Singular value spectrum is identically zero."""


class ZeroResidual(FableError):
    """Residual sum of squares is zero where a positive value is required."""


class ZeroResidualVariance(FableError):
    """A column's residual variance is numerically zero; noise-level
    estimation would divide by it."""


class DegenerateDenominator(FableError):
    """Variance-ratio denominator vanished while the numerator did not."""


class BracketFailure(FableError):
    """Root-finding bracket does not enclose a sign change."""


class InvalidSampleCount(FableError):
    """Number of requested samples must be a positive integer."""


class TooFewSamples(FableError):
    """Not enough samples for the requested quantile computation."""


class GammaTooSmall(FableError):
    """Posterior mean of the noise variance needs shape gamma_n > 2."""


class InvalidAlpha(FableError):
    """Interval level alpha must lie strictly inside (0, 1)."""


class IndexOutOfRange(FableError):
    """A variable index falls outside [0, p)."""


class IndexSetMismatch(FableError):
    """Two collections that must share an index set do not."""


class OverlappingIndexSets(FableError):
    """Index sets that must be disjoint share elements."""


class EmptyTarget(FableError):
    """Target index set must be non-empty."""


class ParseError(FableError):
    """Malformed text input; message carries line and column context."""


class ShapeError(FableError):
    """Parsed input has inconsistent row lengths or impossible dimensions."""


class MagicMismatch(FableError):
    """Binary input does not start with the expected magic bytes."""


class NegativeCount(FableError):
    """Count data required by a log transform contains negative values."""
