"""Dense float64 kernels used by the merge solvers.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. Every function
returns a fresh array and never mutates its inputs.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ShapeError, SingularityError

MAX_RIDGE_ESCALATIONS = 6
_SYMMETRY_TOL = 1e-9
_RESIDUAL_TOL = 1e-8


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise ArithmeticError(f"{what} produced non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def gram_accumulate(acc, z) -> np.ndarray:
    """Return ``acc + z.T @ z``, exactly symmetric."""
    acc, z = as_matrix(acc), as_matrix(z)
    side = z.shape[1]
    if acc.shape != (side, side):
        raise ShapeError(f"accumulator {acc.shape} does not match gram side {side} of z {z.shape}")
    g = z.T @ z
    # BLAS may round the two triangles differently
    g = np.triu(g) + np.triu(g, 1).T
    return _check_finite(acc + g, "gram_accumulate")


def cross_accumulate(acc, z, g) -> np.ndarray:
    """Return ``acc + z.T @ g``."""
    acc, z, g = as_matrix(acc), as_matrix(z), as_matrix(g)
    if z.shape[0] != g.shape[0]:
        raise ShapeError(f"row mismatch between z {z.shape} and g {g.shape}")
    if acc.shape != (z.shape[1], g.shape[1]):
        raise ShapeError(f"accumulator {acc.shape} does not match {(z.shape[1], g.shape[1])}")
    return _check_finite(acc + z.T @ g, "cross_accumulate")


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def solve_spd(s, b, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(s + ridge*I) X = b``; see ``solve_spd_with_ridge``."""
    return solve_spd_with_ridge(s, b, ridge)[0]


def solve_spd_with_ridge(s, b, ridge: float = 0.0) -> tuple[np.ndarray, float]:
    """Solve ``(s + ridge*I) X = b`` for symmetric positive (semi)definite ``s``.

    Uses a Cholesky factorization. When the factorization fails, or the
    solution misses the residual bound, the ridge is multiplied by 10 (at
    most ``MAX_RIDGE_ESCALATIONS`` times). A zero starting ridge escalates
    from ``1e-12 * mean(diag(s))``. Returns the solution and the ridge used.

    Raises:
        ShapeError: ``s`` not square or ``b`` not conformable.
        SingularityError: still unsolvable after escalation; carries the final ridge.
    """
    s, b = as_matrix(s), np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b.reshape(-1, 1)
    if s.shape[0] != s.shape[1]:
        raise ShapeError(f"solve_spd needs a square matrix, got {s.shape}")
    if b.shape[0] != s.shape[0]:
        raise ShapeError(f"right-hand side {b.shape} does not match matrix {s.shape}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    s_norm = frobenius_norm(s)
    asym = frobenius_norm(s - s.T)
    if asym > _SYMMETRY_TOL * max(s_norm, np.finfo(float).tiny):
        raise ShapeError(f"matrix is not symmetric (asymmetry {asym:.3e})")
    s = 0.5 * (s + s.T)
    n = s.shape[0]
    if n == 0:
        return np.zeros_like(b), float(ridge)

    eye = np.eye(n)
    scale = float(np.mean(np.abs(np.diag(s)))) or 1.0
    current = float(ridge)
    for attempt in range(MAX_RIDGE_ESCALATIONS + 1):
        if attempt > 0:
            current = current * 10.0 if current > 0 else 1e-12 * scale
        m = s + current * eye if current else s
        try:
            factor = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        x = scipy.linalg.cho_solve(factor, b, check_finite=False)
        if not np.all(np.isfinite(x)):
            continue
        residual = frobenius_norm(m @ x - b)
        if residual <= _RESIDUAL_TOL * (s_norm + current) * frobenius_norm(x) or residual == 0.0:
            return (x.ravel() if vector_rhs else x), current
    raise SingularityError(
        f"Cholesky factorization failed after {MAX_RIDGE_ESCALATIONS} ridge escalations "
        f"(final ridge {current:.3e})",
        ridge=current,
    )
