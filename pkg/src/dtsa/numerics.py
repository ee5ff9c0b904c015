"""Small dense linear-algebra helpers.

Everything here works on plain ``numpy`` arrays. Matrices in this package are
tiny (node counts and feature dimensions in the tens at most), so clarity wins
over speed.
"""

import numpy as np

__all__ = [
    "NumericsError",
    "SingularMatrixError",
    "ConvergenceError",
    "as_matrix",
    "as_vector",
    "second_singular_value",
    "eigenvalues",
    "is_positive_stable",
    "min_real_eigenvalue",
    "solve_linear",
    "inverse",
    "frobenius_norm",
    "spectral_norm_bound_check",
]


class NumericsError(ValueError):
    """Invalid input to a numerical routine."""


class SingularMatrixError(NumericsError):
    """Raised when elimination meets a pivot below the singularity threshold."""

    def __init__(self, pivot_index, pivot, threshold):
        self.pivot_index = pivot_index
        self.pivot = pivot
        self.threshold = threshold
        super().__init__(
            f"matrix is singular to working precision: pivot {pivot_index} "
            f"has magnitude {abs(pivot):.3e} < {threshold:.3e}"
        )


class ConvergenceError(NumericsError):
    """Raised when an iterative method exhausts its iteration cap."""


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float array."""
    arr = np.array(m, dtype=float)
    if arr.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} has non-finite entries")
    return arr


def as_vector(v, name="vector"):
    """Return ``v`` as a finite 1-D float array."""
    arr = np.array(v, dtype=float)
    if arr.ndim != 1:
        raise NumericsError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} has non-finite entries")
    return arr


def _require_square(m, name="matrix"):
    if m.shape[0] != m.shape[1]:
        raise NumericsError(f"{name} must be square, got shape {m.shape}")


def _is_doubly_stochastic(m, tol=1e-12):
    return (
        np.all(np.abs(m.sum(axis=0) - 1.0) <= tol)
        and np.all(np.abs(m.sum(axis=1) - 1.0) <= tol)
    )


def _subspace_iteration(gram, block, tol, max_iter, rng, project=None):
    """Largest eigenpair of a symmetric PSD matrix by block power iteration.

    A block of ``block`` vectors is pushed through ``gram`` and
    re-orthonormalized each sweep; a Rayleigh-Ritz step on the block picks the
    top Ritz pair. Carrying several vectors keeps convergence fast when the
    leading eigenvalues are clustered, where single-vector power iteration
    stalls. Stops once the top Ritz residual ``||G u - theta u||`` is below
    ``tol``.
    """
    n = gram.shape[0]
    v = rng.standard_normal((n, block))
    if project is not None:
        v = project(v)
    v, _ = np.linalg.qr(v)
    for _ in range(max_iter):
        w = gram @ v
        if project is not None:
            w = project(w)
        theta, s = np.linalg.eigh(v.T @ w)
        u = v @ s[:, -1]
        resid = np.linalg.norm(w @ s[:, -1] - theta[-1] * u)
        if resid <= tol:
            return max(float(theta[-1]), 0.0), u
        if np.linalg.norm(w) <= tol:
            # operator vanishes on the subspace
            return 0.0, u
        v, _ = np.linalg.qr(w @ s[:, ::-1])
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def second_singular_value(m, tol=1e-12, max_iter=100_000, seed=0):
    """Second largest singular value of a square matrix.

    Runs block power iteration on ``M^T M`` after removing the top singular
    pair. For a doubly stochastic ``M`` that pair is known in closed form (the
    normalized all-ones vector with singular value 1); otherwise it is found
    first by the same iteration.

    Parameters
    ----------
    m : array_like
        Square matrix, normally a doubly stochastic weight matrix.
    tol : float
        Residual tolerance of the iteration on ``M^T M``.
    max_iter : int
        Iteration cap; exceeding it raises :class:`ConvergenceError`.
    seed : int
        Seed of the (deterministic) random start block.

    Returns
    -------
    float
        The second singular value, clipped into ``[0, sigma_1]``.
    """
    m = as_matrix(m)
    _require_square(m)
    n = m.shape[0]
    if n == 1:
        return 0.0
    gram = m.T @ m
    rng = np.random.default_rng(seed)
    block = min(n - 1, 4)
    if _is_doubly_stochastic(m):
        top_val = 1.0
        top_vec = np.full(n, 1.0 / np.sqrt(n))
    else:
        _, top_vec = _subspace_iteration(gram, min(n, 4), tol, max_iter, rng)
        top_vec = top_vec / np.linalg.norm(top_vec)
        top_val = np.linalg.norm(m @ top_vec)

    def project(v):
        return v - np.outer(top_vec, top_vec @ v)

    _, u = _subspace_iteration(gram, block, tol, max_iter, rng, project=project)
    # ||M u|| avoids the square root of a rounded Gram eigenvalue, which
    # would turn an O(eps) value into O(sqrt(eps))
    u = project(u[:, None])[:, 0]
    nu = np.linalg.norm(u)
    return float(min(np.linalg.norm(m @ u) / nu, top_val)) if nu > 0 else 0.0


def eigenvalues(m):
    """Complex eigenvalues of a square matrix (LAPACK Hessenberg QR)."""
    m = as_matrix(m)
    _require_square(m)
    return np.linalg.eigvals(m)


def min_real_eigenvalue(m):
    """Smallest real part over the spectrum of ``m``."""
    return float(np.min(eigenvalues(m).real))


def is_positive_stable(m, tol=0.0):
    """True iff every eigenvalue of ``m`` has real part strictly above ``tol``."""
    return min_real_eigenvalue(m) > tol


def solve_linear(a, b, rel_pivot_tol=1e-12):
    """Solve ``a x = b`` by Gaussian elimination with partial pivoting.

    A pivot whose magnitude falls below ``rel_pivot_tol * max|a|`` is treated
    as singular and reported through :class:`SingularMatrixError`, which
    carries the offending pivot index. ``b`` may be a vector or a matrix of
    right-hand sides.
    """
    a = as_matrix(a, "A")
    _require_square(a, "A")
    b = np.array(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise NumericsError(f"right-hand side has {b.shape[0]} rows, expected {a.shape[0]}")
    if not np.all(np.isfinite(b)):
        raise NumericsError("right-hand side has non-finite entries")
    n = a.shape[0]
    vector_rhs = b.ndim == 1
    lu = a.copy()
    x = b.reshape(n, -1).copy()
    scale = np.max(np.abs(a)) if a.size else 0.0
    threshold = rel_pivot_tol * scale
    for col in range(n):
        p = col + int(np.argmax(np.abs(lu[col:, col])))
        if abs(lu[p, col]) <= threshold or scale == 0.0:
            raise SingularMatrixError(col, lu[p, col], threshold)
        if p != col:
            lu[[col, p]] = lu[[p, col]]
            x[[col, p]] = x[[p, col]]
        factors = lu[col + 1:, col] / lu[col, col]
        lu[col + 1:, col:] -= np.outer(factors, lu[col, col:])
        x[col + 1:] -= np.outer(factors, x[col])
    for row in range(n - 1, -1, -1):
        x[row] = (x[row] - lu[row, row + 1:] @ x[row + 1:]) / lu[row, row]
    return x[:, 0] if vector_rhs else x


def inverse(a):
    a = as_matrix(a, "A")
    return solve_linear(a, np.eye(a.shape[0]))


def frobenius_norm(m):
    """Square root of the sum of squared entries."""
    m = np.asarray(m, dtype=float)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm_bound_check(w, xhat, sigma, col_tol=1e-8, slack=1e-9):
    """Check ``||W Xhat||_F <= sigma ||Xhat||_F`` for a zero-column-sum ``Xhat``.

    This is the contraction a doubly stochastic matrix applies to the
    disagreement part of a stacked iterate.
    """
    w = as_matrix(w, "W")
    xhat = as_matrix(np.atleast_2d(np.asarray(xhat, dtype=float).T).T, "Xhat")
    col_sums = xhat.sum(axis=0)
    if np.any(np.abs(col_sums) > col_tol):
        raise NumericsError(
            f"Xhat must have zero column sums, got max |sum| {np.max(np.abs(col_sums)):.3e}"
        )
    return frobenius_norm(w @ xhat) <= sigma * frobenius_norm(xhat) + slack
