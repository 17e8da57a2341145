"""Deterministic decoding of per-point heatmap stacks.

A point's raw network output is a volumetric logit stack (h, w, D), a 2D
logit map (h, w) and a raw uncertainty channel (h, w). Decoding is softmax +
expectation of grid coordinates (soft-argmax), the uncertainty is the
2D-softmax-weighted mean of the raw channel passed through a softplus, and
the 2D/3D estimates can be fused to absolute camera space by solving for the
translation that best reprojects onto the 2D rays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class HeatmapStack:
    """Raw logits for one query point: h3d (h, w, D), h2d (h, w), u (h, w)."""

    h3d: np.ndarray
    h2d: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.h3d = np.asarray(self.h3d, dtype=np.float64)
        self.h2d = np.asarray(self.h2d, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.h3d.ndim != 3:
            raise ValueError("h3d must be (h, w, D)")
        if self.h2d.shape != self.h3d.shape[:2] or self.u.shape != self.h2d.shape:
            raise ValueError("h2d and u must be (h, w) matching h3d")
        for a in (self.h3d, self.h2d, self.u):
            if not np.all(np.isfinite(a)):
                raise ValueError("heatmap logits must be finite")


def _softmax_flat(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def depth_coords(n_slices: int, depth_extent: float) -> np.ndarray:
    """Slice-center depths spanning depth_extent symmetrically about 0."""
    return ((np.arange(n_slices) + 0.5) / n_slices - 0.5) * depth_extent


def soft_argmax_2d(h2d: np.ndarray, x_coords: np.ndarray | None = None,
                   y_coords: np.ndarray | None = None) -> np.ndarray:
    """Softmax-weighted expectation of pixel-center coordinates, returns (x, y).

    Pixel centers default to integer coordinates 0..w-1 / 0..h-1. The softmax
    runs over all h*w positions and is stabilized by max subtraction.
    """
    h2d = np.asarray(h2d, dtype=np.float64)
    h, w = h2d.shape
    x = np.arange(w, dtype=np.float64) if x_coords is None else np.asarray(x_coords, dtype=np.float64)
    y = np.arange(h, dtype=np.float64) if y_coords is None else np.asarray(y_coords, dtype=np.float64)
    p = _softmax_flat(h2d).reshape(h, w)
    return np.array([p.sum(axis=0) @ x, p.sum(axis=1) @ y])


def soft_argmax_3d(h3d: np.ndarray, x_coords: np.ndarray | None = None,
                   y_coords: np.ndarray | None = None,
                   depth_extent: float = 2.2) -> np.ndarray:
    """Soft-argmax over the full volume, returns (x, y, z_rootrel).

    x/y follow the supplied grids (pixel centers by default); the depth axis
    is metric, spanning depth_extent symmetrically about the root.
    """
    h3d = np.asarray(h3d, dtype=np.float64)
    h, w, d = h3d.shape
    x = np.arange(w, dtype=np.float64) if x_coords is None else np.asarray(x_coords, dtype=np.float64)
    y = np.arange(h, dtype=np.float64) if y_coords is None else np.asarray(y_coords, dtype=np.float64)
    z = depth_coords(d, depth_extent)
    p = _softmax_flat(h3d).reshape(h, w, d)
    return np.array([
        p.sum(axis=(0, 2)) @ x,
        p.sum(axis=(1, 2)) @ y,
        p.sum(axis=(0, 1)) @ z,
    ])


def aggregate_uncertainty(u: np.ndarray, h2d: np.ndarray, epsilon: float = 1e-4) -> float:
    """Softmax(h2d)-weighted mean of u, through an overflow-safe softplus, plus epsilon."""
    u = np.asarray(u, dtype=np.float64)
    h2d = np.asarray(h2d, dtype=np.float64)
    pooled = float(_softmax_flat(h2d).reshape(u.shape).ravel() @ u.ravel())
    return float(np.logaddexp(0.0, pooled) + epsilon)


class DegenerateRaysError(np.linalg.LinAlgError):
    """The 2D observations do not constrain the translation (identical rays)."""


def fuse_to_camera(p2d: np.ndarray, p3d_rootrel: np.ndarray,
                   intrinsics: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fuse 2D pixel and root-relative metric 3D estimates to camera space.

    Back-projects each 2D point to a normalized ray r_i = K^-1 [x, y, 1] and
    solves the linear least squares for the translation T minimizing
    sum_i || (p3d_i + T) - ((p3d_i + T) . z) r_i ||^2. Returns
    (p3d_rootrel + T, T).
    """
    p2d = np.asarray(p2d, dtype=np.float64)
    p3d = np.asarray(p3d_rootrel, dtype=np.float64)
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    if p2d.ndim != 2 or p2d.shape[1] != 2 or p3d.shape != (p2d.shape[0], 3):
        raise ValueError("need p2d (n, 2) and p3d_rootrel (n, 3)")
    if p2d.shape[0] < 2:
        raise ValueError("need at least 2 points to fuse")
    if abs(np.linalg.det(intrinsics)) < 1e-12:
        raise ValueError("intrinsics matrix is not invertible")

    ones = np.ones((p2d.shape[0], 1))
    rays = np.linalg.solve(intrinsics, np.hstack([p2d, ones]).T).T
    if np.any(np.abs(rays[:, 2]) < 1e-12):
        raise ValueError("a back-projected ray is parallel to the image plane")
    rays = rays / rays[:, 2:3]

    # rows per point: [1, 0, -rx] (p + T) = 0 and [0, 1, -ry] (p + T) = 0
    n = p2d.shape[0]
    a = np.zeros((2 * n, 3))
    a[0::2, 0] = 1.0
    a[0::2, 2] = -rays[:, 0]
    a[1::2, 1] = 1.0
    a[1::2, 2] = -rays[:, 1]
    b = -np.einsum("rj,rj->r", a, np.repeat(p3d, 2, axis=0))
    s = np.linalg.svd(a, compute_uv=False)
    if s[-1] <= 1e-10 * s[0]:
        raise DegenerateRaysError("all back-projected rays coincide; translation is ambiguous")
    t, *_ = np.linalg.lstsq(a, b, rcond=None)
    return p3d + t, t


def euclidean_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unsquared Euclidean loss ||pred - gt|| and its prediction gradient.

    The zero-error subgradient is taken as 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = pred - gt
    norm = np.linalg.norm(err, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where(norm[..., None] > 0, err / safe[..., None], 0.0)
    return norm, grad


def pointwise_losses(pred: np.ndarray, sigma: np.ndarray, gt: np.ndarray,
                     beta_nll: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """beta-NLL loss and its gradients, broadcast over leading axes.

    value = (||e||/sigma + log sigma) * sigma^beta with e = pred - gt, where
    the sigma^beta factor is gradient-stopped (treated as a constant during
    differentiation). Hence

        grad_pred  = sigma^(beta-1) * e / ||e||
        grad_sigma = sigma^(beta-1) * (1 - ||e||/sigma)

    beta = 0 is the plain NLL; beta = 1 makes grad_pred exactly the
    unsquared-Euclidean-loss gradient regardless of sigma. The zero-error
    prediction subgradient is 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    err = pred - gt
    norm = np.linalg.norm(err, axis=-1)
    value = (norm / sigma + np.log(sigma)) * sigma ** beta_nll
    scale = sigma ** (beta_nll - 1.0)
    safe = np.where(norm > 0, norm, 1.0)
    grad_pred = np.where(norm[..., None] > 0,
                         scale[..., None] * err / safe[..., None], 0.0)
    grad_sigma = scale * (1.0 - norm / sigma)
    return value, grad_pred, grad_sigma
