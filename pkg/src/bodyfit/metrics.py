"""Evaluation metrics: mean point errors, Procrustes alignment, rotation angles."""

from __future__ import annotations

import numpy as np


def mean_point_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over corresponding points (MPJPE / MVE)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


mpjpe = mean_point_error
mve = mean_point_error


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align pred to gt (rotation + translation + scale).

    Minimizes the summed squared distance; used for the "P-" metric
    variants. A single point (or zero spread) degenerates to a pure
    translation.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and gt must both be (n, 3)")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    pc = pred - mu_p
    gc = gt - mu_g
    var_p = np.sum(pc ** 2)
    if pred.shape[0] == 1 or var_p < 1e-30:
        return pred + (mu_g - mu_p)
    cov = gc.T @ pc
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    scale = (s[0] + s[1] + d * s[2]) / var_p
    return scale * pc @ rot.T + mu_g


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    cos = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def mean_geodesic_angle(rots1: np.ndarray, rots2: np.ndarray) -> float:
    """Mean per-part rotation error (MPJAE-style), inputs (K, 3, 3)."""
    cos = (np.einsum("kji,kji->k", rots1, rots2) - 1.0) / 2.0
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))
