"""Ridge-regularized linear least squares for the shape/translation step.

Solved through the normal equations with a Cholesky factorization; the
column count is tiny (N_beta + 3), so conditioning is not a concern. The
first `unpenalized_prefix` shape components and the translation columns are
never penalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg


class SingularSystemError(np.linalg.LinAlgError):
    """Normal matrix is singular and no regularization was requested."""


@dataclass
class ShapeSolveConfig:
    ridge_lambda: float = 0.1
    unpenalized_prefix: int = 2
    point_weights: Optional[np.ndarray] = None  # (n_points,), one weight per 3 rows

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be nonnegative")
        if self.unpenalized_prefix < 0:
            raise ValueError("unpenalized_prefix must be nonnegative")


def ridge_solve(design: np.ndarray, rhs: np.ndarray, penalty_diag: np.ndarray,
                row_weights: np.ndarray | None = None) -> np.ndarray:
    """Minimize sum_i w_i (A_i x - b_i)^2 + x^T diag(penalty) x.

    Assembles A^T W A + diag(penalty) and solves it by Cholesky. Raises
    SingularSystemError when the normal matrix is not positive definite and
    the penalty is identically zero.
    """
    if row_weights is not None:
        wa = design * row_weights[:, None]
    else:
        wa = design
    normal = wa.T @ design
    normal[np.diag_indices_from(normal)] += penalty_diag
    rhs_n = wa.T @ rhs
    try:
        cho = scipy.linalg.cho_factor(normal, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "normal matrix is singular; the unregularized system is rank-deficient"
        ) from exc
    return scipy.linalg.cho_solve(cho, rhs_n, check_finite=False)


def beta_penalty_diag(n_beta: int, ridge_lambda: float, unpenalized_prefix: int,
                      n_translations: int = 1) -> np.ndarray:
    """Penalty diagonal for [beta; t...]: zero on the prefix and on translations."""
    if unpenalized_prefix > n_beta:
        raise ValueError(f"unpenalized_prefix {unpenalized_prefix} exceeds n_beta {n_beta}")
    diag = np.full(n_beta + 3 * n_translations, float(ridge_lambda))
    diag[:unpenalized_prefix] = 0.0
    diag[n_beta:] = 0.0
    return diag


def solve_beta_t(jacobian: np.ndarray, residual: np.ndarray,
                 cfg: ShapeSolveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Solve for (beta, t) from the stacked Jacobian and residual.

    The Jacobian is (3*n_points, n_beta+3) as produced by shape_jacobian();
    the residual is target minus current fit, flattened the same way. Each
    point's three rows share one optional weight. Returns (beta, t).
    """
    jacobian = np.asarray(jacobian, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64).reshape(-1)
    if jacobian.ndim != 2 or jacobian.shape[0] != residual.shape[0]:
        raise ValueError(
            f"jacobian {jacobian.shape} and residual {residual.shape} are inconsistent")
    if jacobian.shape[0] % 3 != 0:
        raise ValueError("row count must be a multiple of 3 (xyz per point)")
    if not (np.all(np.isfinite(jacobian)) and np.all(np.isfinite(residual))):
        raise ValueError("non-finite values in the linear system")
    n_beta = jacobian.shape[1] - 3

    row_weights = None
    if cfg.point_weights is not None:
        pw = np.asarray(cfg.point_weights, dtype=np.float64)
        if pw.shape != (jacobian.shape[0] // 3,):
            raise ValueError(
                f"point_weights must have length {jacobian.shape[0] // 3}, got {pw.shape}")
        row_weights = np.repeat(pw, 3)

    diag = beta_penalty_diag(n_beta, cfg.ridge_lambda, cfg.unpenalized_prefix)
    x = ridge_solve(jacobian, residual, diag, row_weights)
    return x[:n_beta], x[n_beta:]
