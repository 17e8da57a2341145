"""Weighted Kabsch/Wahba rotation estimation and SO(3) projection.

Two covariance variants feed the same SVD projection: the mean-centered one
used by the independent per-part rotation fits, and the pivot-anchored one
used by the kinematic-chain refinement pass (no centering, points already
expressed relative to their pivots).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CorrespondenceSet:
    """Weighted point correspondences (target_points[i] <-> source_points[i])."""

    target_points: np.ndarray  # (n, 3)
    source_points: np.ndarray  # (n, 3)
    weights: np.ndarray        # (n,), nonnegative

    def __post_init__(self):
        self.target_points = np.asarray(self.target_points, dtype=np.float64)
        self.source_points = np.asarray(self.source_points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.target_points.shape[0]
        if n < 2:
            raise ValueError("need at least 2 correspondences")
        if self.source_points.shape != (n, 3) or self.target_points.shape != (n, 3):
            raise ValueError("target_points and source_points must both be (n, 3)")
        if self.weights.shape != (n,):
            raise ValueError(f"weights must be ({n},)")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")
        if not np.any(self.weights > 0):
            raise ValueError("at least one weight must be positive")


def weighted_covariance(corr: CorrespondenceSet) -> np.ndarray:
    """Weighted cross-covariance about the weighted means.

    Sigma = sum_i w_i (p_i - pbar)(q_i - qbar)^T with p = target, q = source
    and weighted means pbar, qbar. Weights are normalized internally, so a
    uniform rescaling of the weights leaves the result (and the projected
    rotation) unchanged.
    """
    w = corr.weights / corr.weights.sum()
    p = corr.target_points - w @ corr.target_points
    q = corr.source_points - w @ corr.source_points
    return (p * w[:, None]).T @ q


def pivot_anchored_covariance(target: np.ndarray, source: np.ndarray,
                              weights: np.ndarray | None = None) -> np.ndarray:
    """Cross-covariance with no centering: sum_i w_i p_i q_i^T.

    Both inputs must already be expressed relative to their pivots (the
    caller subtracts the anchor points).
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if weights is None:
        return target.T @ source
    weights = np.asarray(weights, dtype=np.float64)
    return (target * weights[:, None]).T @ source


def project_to_so3(matrix: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix to the nearest rotation via SVD.

    With M = U S V^T, returns U diag(1, 1, det(UV^T)) V^T, the rotation
    maximizing trace(R^T M). Rank-deficient inputs (including zero) still
    yield a valid rotation, deterministically resolved by the SVD ordering.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-2:] != (3, 3):
        raise ValueError(f"expected trailing (3, 3), got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("matrix contains non-finite entries")
    return _project_to_so3_many(matrix)


def _project_to_so3_many(matrices: np.ndarray) -> np.ndarray:
    """SVD projection, batched over leading axes of (..., 3, 3)."""
    u, _, vt = np.linalg.svd(matrices)
    det = np.linalg.det(u @ vt)
    u = u.copy()
    u[..., :, 2] *= np.where(det < 0, -1.0, 1.0)[..., None]
    return u @ vt


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Geodesic angle (radians) between rotations, batched over leading axes."""
    cos = (np.einsum("...ji,...ji->...", r1, r2) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))
