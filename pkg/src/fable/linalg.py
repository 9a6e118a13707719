"""Dense linear algebra used by the rest of the package.

Centering, truncated (optionally randomized) SVD with a fixed sign
convention, a matrix-free spectral norm, and the Gaussian log-likelihood
for a low-rank-plus-diagonal covariance evaluated without ever forming
the p x p matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import scipy.linalg

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    NonFinite,
    NonPositiveDiag,
    RankOutOfRange,
    TooFewRows,
)

__all__ = [
    "DataMatrix",
    "TruncatedSvd",
    "StructuredCovariance",
    "LinearMap",
    "center_columns",
    "truncated_svd",
    "spectral_norm",
    "gaussian_loglik",
    "covariance_difference",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


def _as_float_matrix(raw: np.ndarray, name: str = "input") -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-d, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise NonFinite(f"{name} contains NaN or infinite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DataMatrix:
    """An n x p data matrix, rows are observations.

    ``centered`` records whether column means have already been removed;
    when it is set, ``column_means`` holds the means that were subtracted
    so downstream artifacts can report them.
    """

    values: np.ndarray
    centered: bool = False
    column_means: np.ndarray | None = None

    def __post_init__(self) -> None:
        vals = _as_float_matrix(self.values, "data matrix")
        if vals.shape[0] < 2:
            raise TooFewRows(f"need at least 2 rows, got {vals.shape[0]}")
        object.__setattr__(self, "values", _frozen(vals))
        if self.centered:
            if self.column_means is None:
                raise DimensionMismatch("centered data must carry column_means")
            means = np.asarray(self.column_means, dtype=np.float64)
            if means.shape != (vals.shape[1],):
                raise DimensionMismatch(
                    f"column_means shape {means.shape} does not match p={vals.shape[1]}"
                )
            if not np.isfinite(means).all():
                raise NonFinite("column_means contains NaN or infinite entries")
            scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
            resid = np.abs(vals.mean(axis=0)).max(initial=0.0)
            if resid > 1e-8 * scale:
                raise ValueError(
                    f"claimed centered but max |column mean| = {resid:.3e}"
                )
            object.__setattr__(self, "column_means", _frozen(means))
        elif self.column_means is not None:
            raise DimensionMismatch("column_means only makes sense with centered=True")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]


@dataclass(frozen=True)
class TruncatedSvd:
    """Rank-k factors of a matrix plus the singular value spectrum.

    ``spectrum`` keeps every singular value the backing decomposition
    produced (all min(n, p) for the exact method, the sketch width for
    the randomized one); ``singvals`` is its first k entries.
    """

    u: np.ndarray
    singvals: np.ndarray
    v: np.ndarray
    spectrum: np.ndarray
    k: int

    def __post_init__(self) -> None:
        u = _as_float_matrix(self.u, "u")
        v = _as_float_matrix(self.v, "v")
        s = np.asarray(self.singvals, dtype=np.float64)
        spec = np.asarray(self.spectrum, dtype=np.float64)
        k = int(self.k)
        if u.shape[1] != k or v.shape[1] != k or s.shape != (k,):
            raise DimensionMismatch("factor widths must all equal k")
        if spec.ndim != 1 or spec.shape[0] < k:
            raise DimensionMismatch("spectrum must hold at least k values")
        if np.any(s < 0) or np.any(np.diff(spec) > 1e-12 * max(1.0, spec[0])):
            raise ValueError("singular values must be nonnegative and non-increasing")
        for mat, nm in ((u, "u"), (v, "v")):
            gram = mat.T @ mat
            if np.abs(gram - np.eye(k)).max() > 1e-8:
                raise ValueError(f"columns of {nm} are not orthonormal")
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "v", _frozen(v))
        object.__setattr__(self, "singvals", _frozen(s))
        object.__setattr__(self, "spectrum", _frozen(spec))
        object.__setattr__(self, "k", k)


@dataclass(frozen=True)
class StructuredCovariance:
    """Covariance of the form loadings @ loadings.T + diag(diag).

    Stored in factored form; ``dense`` exists for small-p diagnostics and
    tests, everything at scale should go through ``matvec``.
    """

    loadings: np.ndarray
    diag: np.ndarray

    def __post_init__(self) -> None:
        g = _as_float_matrix(self.loadings, "loadings")
        d = np.asarray(self.diag, dtype=np.float64)
        if d.ndim != 1 or d.shape[0] != g.shape[0]:
            raise DimensionMismatch(
                f"diag shape {d.shape} does not match loadings rows {g.shape[0]}"
            )
        if not np.isfinite(d).all():
            raise NonFinite("diag contains NaN or infinite entries")
        if np.any(d <= 0):
            raise NonPositiveDiag("diagonal entries must be strictly positive")
        object.__setattr__(self, "loadings", _frozen(g))
        object.__setattr__(self, "diag", _frozen(d))

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.loadings @ (self.loadings.T @ x) + self.diag * x

    def dense(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.diag)


@dataclass(frozen=True)
class LinearMap:
    """Matrix-free linear operator: just a shape and matvec callables.

    ``rmatvec`` defaults to ``matvec`` for symmetric operators.
    """

    shape: tuple[int, int]
    matvec: Callable[[np.ndarray], np.ndarray]
    rmatvec: Callable[[np.ndarray], np.ndarray] | None = field(default=None)

    def __post_init__(self) -> None:
        if self.rmatvec is None:
            if self.shape[0] != self.shape[1]:
                raise DimensionMismatch("rmatvec required for non-square maps")
            object.__setattr__(self, "rmatvec", self.matvec)


MatrixLike = Union[np.ndarray, LinearMap]


def center_columns(raw: np.ndarray) -> DataMatrix:
    """Subtract column means and return the centered matrix.

    Columns that are constant become identically zero; that is allowed
    but flagged with a warning because later noise-variance estimates
    will reject them.
    """
    vals = _as_float_matrix(raw, "data matrix")
    if vals.shape[0] < 2:
        raise TooFewRows(f"need at least 2 rows to center, got {vals.shape[0]}")
    means = vals.mean(axis=0)
    centered = vals - means
    dead = np.flatnonzero(np.abs(centered).max(axis=0) == 0.0)
    if dead.size:
        warnings.warn(
            f"{dead.size} constant column(s) became identically zero after "
            f"centering (first index {dead[0]})",
            RuntimeWarning,
            stacklevel=2,
        )
    return DataMatrix(values=centered, centered=True, column_means=means)


def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Convention: the largest-magnitude entry of each right vector is
    # made positive (first index wins ties) so factors are reproducible
    # across LAPACK builds.
    u = u.copy()
    v = v.copy()
    for j in range(v.shape[1]):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0:
            v[:, j] = -v[:, j]
            u[:, j] = -u[:, j]
    return u, v


def _values_of(data: DataMatrix | np.ndarray) -> np.ndarray:
    if isinstance(data, DataMatrix):
        return data.values
    return _as_float_matrix(data, "data matrix")


def truncated_svd(
    data: DataMatrix | np.ndarray,
    k: int,
    *,
    method: str = "exact",
    seed: int = 0,
) -> TruncatedSvd:
    """Top-k singular triplets of the data matrix.

    Parameters
    ----------
    data : DataMatrix or ndarray
        Matrix to decompose.
    k : int
        Number of retained components, 1 <= k <= min(n, p).
    method : {"exact", "randomized"}
        "exact" runs a full LAPACK SVD and keeps the whole spectrum.
        "randomized" uses a Gaussian sketch with oversampling 10 and two
        power iterations; its spectrum only extends to the sketch width.
    seed : int
        Seeds the sketch. Ignored by the exact method.

    Returns
    -------
    TruncatedSvd
    """
    vals = _values_of(data)
    n, p = vals.shape
    limit = min(n, p)
    if not isinstance(k, (int, np.integer)) or not 1 <= int(k) <= limit:
        raise RankOutOfRange(f"k={k} outside [1, {limit}] for shape {vals.shape}")
    k = int(k)

    if method == "exact":
        u_full, s_full, vt_full = np.linalg.svd(vals, full_matrices=False)
        u, v = _fix_signs(u_full[:, :k], vt_full[:k].T)
        return TruncatedSvd(u=u, singvals=s_full[:k], v=v, spectrum=s_full, k=k)

    if method != "randomized":
        raise ValueError(f"unknown method {method!r}")

    ell = min(k + 10, limit)
    rng = np.random.default_rng(seed)
    sketch = vals @ rng.standard_normal((p, ell))
    q, _ = np.linalg.qr(sketch)
    for _ in range(2):
        # Power iterations sharpen the subspace; re-orthonormalize each
        # pass to keep the basis from collapsing.
        q, _ = np.linalg.qr(vals @ (vals.T @ q))
    b = q.T @ vals
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u, v = _fix_signs((q @ ub)[:, :k], vt[:k].T)
    return TruncatedSvd(u=u, singvals=s[:k], v=v, spectrum=s, k=k)


def spectral_norm(
    a: MatrixLike,
    *,
    tol: float = 1e-8,
    max_iter: int = 10000,
    seed: int = 0,
) -> float:
    """Largest singular value via power iteration on A.T @ A.

    Accepts a dense array or a :class:`LinearMap`; the latter keeps the
    computation matrix-free for structured operators. Stops when the
    Rayleigh residual ||A.T A x - theta x|| falls below ``tol * theta``.
    Raises :class:`ConvergenceFailure` after ``max_iter`` iterations.
    """
    if isinstance(a, LinearMap):
        shape = a.shape
        matvec, rmatvec = a.matvec, a.rmatvec
    else:
        arr = _as_float_matrix(a, "operand")
        shape = arr.shape
        matvec = lambda x: arr @ x  # noqa: E731
        rmatvec = lambda x: arr.T @ x  # noqa: E731

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape[1])
    x /= np.linalg.norm(x)
    for _ in range(max_iter):
        y = rmatvec(matvec(x))
        theta = float(x @ y)
        if np.linalg.norm(y - theta * x) <= tol * theta:
            return float(np.sqrt(max(theta, 0.0)))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # x landed in the null space of A.T A; the operator is zero
            # on the relevant subspace.
            return 0.0
        x = y / ny
    raise ConvergenceFailure(
        f"power iteration did not meet tol={tol} within {max_iter} iterations"
    )


def gaussian_loglik(data: DataMatrix | np.ndarray, cov: StructuredCovariance) -> float:
    """Log-density of mean-zero Gaussian rows under a factored covariance.

    Uses the matrix inversion and determinant lemmas so the cost is
    O(n p k + k^3) and the p x p covariance is never formed. ``data``
    rows are treated as independent draws; pass centered values.
    """
    vals = _values_of(data)
    n, p = vals.shape
    if p != cov.p:
        raise DimensionMismatch(f"data has p={p} but covariance has p={cov.p}")
    delta = cov.diag
    g = cov.loadings
    quad_diag = ((vals * vals) / delta).sum(axis=1)
    logdet = float(np.log(delta).sum())
    if cov.k:
        gd = g / delta[:, None]
        cap = np.eye(cov.k) + g.T @ gd
        chol = np.linalg.cholesky(cap)
        w = scipy.linalg.solve_triangular(chol, (vals @ gd).T, lower=True)
        quad = quad_diag - (w * w).sum(axis=0)
        logdet += 2.0 * float(np.log(np.diag(chol)).sum())
    else:
        quad = quad_diag
    return float(-0.5 * (n * p * _LOG_2PI + n * logdet + quad.sum()))


def covariance_difference(a: StructuredCovariance, b: StructuredCovariance) -> LinearMap:
    """The symmetric operator a - b without forming either matrix."""
    if a.p != b.p:
        raise DimensionMismatch(f"operands have p={a.p} and p={b.p}")

    def matvec(x: np.ndarray) -> np.ndarray:
        return a.matvec(x) - b.matvec(x)

    return LinearMap(shape=(a.p, a.p), matvec=matvec)
