"""Alternating body-model fitting to target vertices and joints.

Each fit alternates two steps for a small number of iterations: (1) per body
part, an incremental global rotation from a weighted Kabsch alignment of the
current fit against the target (joints weighted 1-alpha, vertices alpha);
(2) a ridge-regularized linear solve for shape and translation using the
exact Jacobian of the posed points. A final pass walks the kinematic tree
and re-fits each part's rotation anchored at its pivot joint, which absorbs
bone-length mismatch between the fitted shape and the targets.

Variants: per-point uncertainty weighting (w ~ sigma^-1.5), fitting to a
vertex subset, and a shared shape vector across several targets of the same
subject. All internals carry a leading batch axis; a single fit is a batch
of one, and batches of independent targets vectorize across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .body_model import BodyModel, PoseParams, _forward_batch, _shape_affine_batch
from .rotation_fitting import _project_to_so3_many
from .shape_solver import ShapeSolveConfig, beta_penalty_diag, ridge_solve


@dataclass
class FitTarget:
    """Fitting target: vertices (possibly a subset), all joints, optional sigmas.

    vertex_indices maps each target vertex row to a model vertex; None means
    the rows cover all model vertices in order. sigmas has one entry per
    target vertex followed by one per joint, strictly positive.
    """

    vertices: np.ndarray
    joints: np.ndarray
    vertex_indices: Optional[np.ndarray] = None
    sigmas: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.vertex_indices is not None:
            self.vertex_indices = np.asarray(self.vertex_indices, dtype=np.int64)
            if self.vertex_indices.shape != (self.vertices.shape[0],):
                raise ValueError("vertex_indices must have one entry per target vertex")
            if np.unique(self.vertex_indices).size != self.vertex_indices.size:
                raise ValueError("vertex_indices must be unique")
        if self.sigmas is not None:
            self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
            n_total = self.vertices.shape[0] + self.joints.shape[0]
            if self.sigmas.shape != (n_total,):
                raise ValueError(f"sigmas must have length {n_total}")
            if not np.all(self.sigmas > 0):
                raise ValueError("sigmas must be strictly positive")


@dataclass
class FitConfig:
    n_iters: int = 3
    vertex_weight_alpha: float = 1e-6
    shape_cfg: ShapeSolveConfig = field(default_factory=ShapeSolveConfig)
    vertex_subset: Optional[np.ndarray] = None
    use_uncertainty_weights: bool = False
    # exponent e in w = sigma^-e; weights are normalized to mean 1 and used in
    # all three steps, including the final chain refinement
    uncertainty_exponent: float = 1.5

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if not 0 < self.vertex_weight_alpha < 1:
            raise ValueError("vertex_weight_alpha must lie strictly between 0 and 1")
        if self.vertex_subset is not None:
            self.vertex_subset = np.asarray(self.vertex_subset, dtype=np.int64)


@dataclass
class FitResult:
    pose: PoseParams
    per_iteration_vertex_rmse: list[float]
    final_vertex_rmse: float
    final_joint_rmse: float


class DegeneratePartError(ValueError):
    """A body part retains too few / collinear points to determine its rotation."""


# ---------------------------------------------------------------------------
# Batched core

def _part_index_lists(model: BodyModel, subset: np.ndarray) -> list[np.ndarray]:
    """Positions within `subset` of each part's vertices."""
    part_of = model.part_vertex_index[subset]
    return [np.flatnonzero(part_of == k) for k in range(model.n_parts)]


def _check_part_coverage(model: BodyModel, subset: np.ndarray,
                         part_verts: list[np.ndarray]) -> None:
    """Every part needs >= 3 non-collinear points (subset vertices + its joints)."""
    rest = model.rest_joints
    for k in range(model.n_parts):
        pts = np.concatenate([
            model.template_vertices[subset[part_verts[k]]],
            rest[model.part_joints[k]],
        ])
        if pts.shape[0] < 3:
            raise DegeneratePartError(
                f"part {k} retains only {pts.shape[0]} points under the vertex subset")
        centered = pts - pts.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[1] <= 1e-8 * max(s[0], 1e-30):
            raise DegeneratePartError(
                f"part {k}'s points are collinear under the vertex subset; "
                "its rotation would be underdetermined")


def _point_weights(sigmas: Optional[np.ndarray], exponent: float) -> Optional[np.ndarray]:
    """sigma^-e, normalized to mean 1 per batch item."""
    if sigmas is None:
        return None
    u = sigmas ** (-exponent)
    return u / u.mean(axis=1, keepdims=True)


def _fit_rotations_centered(model, tv, tj, fit_v, fit_j, rotations, alpha,
                            part_verts, u_v, u_j):
    """One independent per-part rotation pass (step 1). Updates rotations in place."""
    n_parts = model.n_parts
    B = tv.shape[0]
    covs = np.empty((B, n_parts, 3, 3))
    for k in range(n_parts):
        vk = part_verts[k]
        jk = model.part_joints[k]
        tgt = np.concatenate([tv[:, vk], tj[:, jk]], axis=1)
        src = np.concatenate([fit_v[:, vk], fit_j[:, jk]], axis=1)
        if u_v is None:
            w = np.concatenate([
                np.full(vk.size, alpha), np.full(jk.size, 1.0 - alpha)])
            w = np.broadcast_to(w / w.sum(), (B, w.size))
        else:
            w = np.concatenate([alpha * u_v[:, vk], (1.0 - alpha) * u_j[:, jk]], axis=1)
            w = w / w.sum(axis=1, keepdims=True)
        mean_t = np.einsum("bm,bmi->bi", w, tgt)
        mean_s = np.einsum("bm,bmi->bi", w, src)
        covs[:, k] = np.einsum("bm,bmi,bmj->bij", w,
                               tgt - mean_t[:, None], src - mean_s[:, None])
    # Pi(Sigma) R == Pi(Sigma R) for R in SO(3): composing inside the SVD
    # projection performs the update and the re-orthonormalization in one go
    return _project_to_so3_many(covs @ rotations)


def _fit_rotations_chained(model, tv, tj, fit_v, fit_j, rotations, beta,
                           part_verts, u_v, u_j):
    """Final refinement pass (step 3): pivot-anchored, sequential along the tree.

    Pivots for the targets are re-derived from each refined parent rotation
    and the beta-implied rest bone; the current fit keeps its own (old)
    pivot, the fitted joint. Vertices and joints carry equal weight here.
    """
    B = tv.shape[0]
    rest = model.rest_joints[None] + np.einsum("jcs,bs->bjc", model.joint_blendshapes, beta)
    refined = np.empty_like(rotations)
    new_pivot = np.empty((B, model.n_joints, 3))
    for k in range(model.n_parts):
        p = model.parent[k]
        if p < 0:
            new_pivot[:, k] = fit_j[:, k]  # root position is not changed
        else:
            bone = rest[:, k] - rest[:, p]
            new_pivot[:, k] = new_pivot[:, p] + np.einsum(
                "bij,bj->bi", refined[:, p], bone)
        vk = part_verts[k]
        jk = model.part_joints[k]
        tgt = np.concatenate([tv[:, vk], tj[:, jk]], axis=1) - new_pivot[:, k][:, None]
        src = np.concatenate([fit_v[:, vk], fit_j[:, jk]], axis=1) - fit_j[:, k][:, None]
        if u_v is None:
            cov = np.einsum("bmi,bmj->bij", tgt, src)
        else:
            w = np.concatenate([u_v[:, vk], u_j[:, jk]], axis=1)
            cov = np.einsum("bm,bmi,bmj->bij", w, tgt, src)
        refined[:, k] = _project_to_so3_many(cov @ rotations[:, k])
    return refined


def _solve_shape_batch(model, tv, tj, rotations, subset, cfg: ShapeSolveConfig,
                       u_pts, shared_beta: bool):
    """Shape/translation solve against the beta=0, t=0 base fit.

    Posed points are affine in (beta, t) at fixed rotations, so solving the
    residual to the zero-shape base yields the absolute (beta, t) and the
    ridge penalizes the actual shape vector. With shared_beta, all items are
    stacked into one system with a single beta and per-item translations.
    """
    B = tv.shape[0]
    n_beta = model.n_betas
    base, jac = _shape_affine_batch(model, rotations, subset)
    n_pts = base.shape[1]
    resid = np.concatenate([tv, tj], axis=1) - base
    tiled_eye = np.tile(np.eye(3), (n_pts, 1))
    row_w = None if u_pts is None else np.repeat(u_pts, 3, axis=1)

    if not shared_beta:
        betas = np.empty((B, n_beta))
        ts = np.empty((B, 3))
        diag = beta_penalty_diag(n_beta, cfg.ridge_lambda, cfg.unpenalized_prefix)
        for b in range(B):
            design = np.hstack([jac[b].reshape(3 * n_pts, n_beta), tiled_eye])
            x = ridge_solve(design, resid[b].reshape(-1), diag,
                            None if row_w is None else row_w[b])
            betas[b], ts[b] = x[:n_beta], x[n_beta:]
        return betas, ts

    rows = 3 * n_pts
    design = np.zeros((B * rows, n_beta + 3 * B))
    for b in range(B):
        design[b * rows:(b + 1) * rows, :n_beta] = jac[b].reshape(rows, n_beta)
        design[b * rows:(b + 1) * rows, n_beta + 3 * b:n_beta + 3 * (b + 1)] = tiled_eye
    diag = beta_penalty_diag(n_beta, cfg.ridge_lambda, cfg.unpenalized_prefix,
                             n_translations=B)
    x = ridge_solve(design, resid.reshape(-1), diag,
                    None if row_w is None else row_w.reshape(-1))
    beta = x[:n_beta]
    return np.broadcast_to(beta, (B, n_beta)).copy(), x[n_beta:].reshape(B, 3)


def _vertex_rmse(fit_v, tv):
    return np.sqrt(np.mean(np.sum((fit_v - tv) ** 2, axis=2), axis=1))


def _fit_core(model: BodyModel, tv: np.ndarray, tj: np.ndarray,
              sigmas: Optional[np.ndarray], cfg: FitConfig, subset: np.ndarray,
              shared_beta: bool = False):
    """Run the full algorithm on a batch of targets restricted to `subset`.

    tv: (B, n_sub, 3), tj: (B, N_j, 3), sigmas: (B, n_sub+N_j) or None.
    Returns (rotations, betas, ts, per_iter_rmse (B, n_iters)).
    """
    B, n_sub = tv.shape[:2]
    part_verts = _part_index_lists(model, subset)
    u = _point_weights(sigmas, cfg.uncertainty_exponent)
    u_v = None if u is None else u[:, :n_sub]
    u_j = None if u is None else u[:, n_sub:]
    sub = None if n_sub == model.n_vertices else subset  # None = no row gathering

    rotations = np.broadcast_to(np.eye(3), (B, model.n_parts, 3, 3)).copy()
    betas = np.zeros((B, model.n_betas))
    ts = np.zeros((B, 3))
    fit_v, fit_j = _forward_batch(model, rotations, betas, ts, sub)

    per_iter = np.empty((B, cfg.n_iters))
    for it in range(cfg.n_iters):
        rotations = _fit_rotations_centered(
            model, tv, tj, fit_v, fit_j, rotations, cfg.vertex_weight_alpha,
            part_verts, u_v, u_j)
        fit_v, fit_j = _forward_batch(model, rotations, betas, ts, sub)

        betas, ts = _solve_shape_batch(model, tv, tj, rotations, sub,
                                       cfg.shape_cfg, u, shared_beta)
        fit_v, fit_j = _forward_batch(model, rotations, betas, ts, sub)
        per_iter[:, it] = _vertex_rmse(fit_v, tv)

    rotations = _fit_rotations_chained(
        model, tv, tj, fit_v, fit_j, rotations, betas, part_verts, u_v, u_j)
    return rotations, betas, ts, per_iter


# ---------------------------------------------------------------------------
# Public API

def _resolve_subset(model: BodyModel, target: FitTarget,
                    cfg: FitConfig) -> np.ndarray:
    if target.vertex_indices is not None and cfg.vertex_subset is not None:
        if not np.array_equal(np.sort(target.vertex_indices), np.sort(cfg.vertex_subset)):
            raise ValueError(
                "target.vertex_indices and cfg.vertex_subset disagree; supply one of them")
    if target.vertex_indices is not None:
        return target.vertex_indices
    if cfg.vertex_subset is not None:
        return cfg.vertex_subset
    return np.arange(model.n_vertices)


def _validate_target(model: BodyModel, target: FitTarget, subset: np.ndarray) -> None:
    if subset.size:
        if subset.min() < 0 or subset.max() >= model.n_vertices:
            raise ValueError("vertex subset index out of range")
    if np.unique(subset).size != subset.size:
        raise ValueError("vertex subset indices must be unique")
    if target.joints.shape != (model.n_joints, 3):
        raise ValueError(
            f"target joints have shape {target.joints.shape}, "
            f"expected ({model.n_joints}, 3)")
    if not (np.all(np.isfinite(target.vertices)) and np.all(np.isfinite(target.joints))):
        raise ValueError("target contains non-finite values")


def _target_rows_for_subset(target: FitTarget, subset: np.ndarray,
                            model: BodyModel) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Target vertex rows (and sigma rows) matching the fitting subset order."""
    if target.vertex_indices is not None:
        return target.vertices, target.sigmas
    if target.vertices.shape[0] != model.n_vertices:
        raise ValueError(
            f"target has {target.vertices.shape[0]} vertices but no vertex_indices; "
            f"expected all {model.n_vertices}")
    verts = target.vertices[subset]
    if target.sigmas is None:
        return verts, None
    sig = np.concatenate([target.sigmas[:model.n_vertices][subset],
                          target.sigmas[model.n_vertices:]])
    return verts, sig


def _finalize(model: BodyModel, target: FitTarget, rotations, beta, t,
              per_iter) -> FitResult:
    pose = PoseParams(rotations=rotations, beta=beta, translation=t)
    verts, joints = _forward_batch(model, rotations[None], beta[None], t[None])
    verts, joints = verts[0], joints[0]
    if target.vertex_indices is not None:
        fit_rows = verts[target.vertex_indices]
    else:
        fit_rows = verts
    final_v = float(np.sqrt(np.mean(np.sum((fit_rows - target.vertices) ** 2, axis=1))))
    final_j = float(np.sqrt(np.mean(np.sum((joints - target.joints) ** 2, axis=1))))
    return FitResult(pose=pose, per_iteration_vertex_rmse=[float(x) for x in per_iter],
                     final_vertex_rmse=final_v, final_joint_rmse=final_j)


def _prepare_single(model, target, cfg):
    subset = _resolve_subset(model, target, cfg)
    _validate_target(model, target, subset)
    if cfg.vertex_subset is not None or target.vertex_indices is not None:
        _check_part_coverage(model, subset, _part_index_lists(model, subset))
    tv, sig = _target_rows_for_subset(target, subset, model)
    if cfg.use_uncertainty_weights and sig is None:
        raise ValueError("use_uncertainty_weights requires target sigmas")
    if not cfg.use_uncertainty_weights:
        sig = None
    return subset, tv, sig


def fit(model: BodyModel, target: FitTarget, cfg: FitConfig = None) -> FitResult:
    """Fit pose, shape and translation of `model` to one target."""
    cfg = cfg or FitConfig()
    subset, tv, sig = _prepare_single(model, target, cfg)
    rot, beta, t, per_iter = _fit_core(
        model, tv[None], target.joints[None],
        None if sig is None else sig[None], cfg, subset)
    return _finalize(model, target, rot[0], beta[0], t[0], per_iter[0])


def fit_subset(model: BodyModel, target: FitTarget, cfg: FitConfig) -> FitResult:
    """Fit using only the configured vertex subset (identical pipeline).

    The reported final vertex RMSE is re-evaluated on all vertices the
    target provides, not just the fitting subset.
    """
    if cfg.vertex_subset is None and target.vertex_indices is None:
        raise ValueError("fit_subset needs cfg.vertex_subset or target.vertex_indices")
    return fit(model, target, cfg)


def fit_many(model: BodyModel, targets: Sequence[FitTarget],
             cfg: FitConfig = None) -> list[FitResult]:
    """Fit a batch of independent targets, vectorized when shapes allow."""
    cfg = cfg or FitConfig()
    if not targets:
        return []
    prepared = [_prepare_single(model, t, cfg) for t in targets]
    subset0 = prepared[0][0]
    homogeneous = all(
        np.array_equal(p[0], subset0) and (p[2] is None) == (prepared[0][2] is None)
        for p in prepared)
    if not homogeneous:
        return [fit(model, t, cfg) for t in targets]
    tv = np.stack([p[1] for p in prepared])
    tj = np.stack([t.joints for t in targets])
    sig = None if prepared[0][2] is None else np.stack([p[2] for p in prepared])
    rot, beta, t, per_iter = _fit_core(model, tv, tj, sig, cfg, subset0)
    return [_finalize(model, targets[b], rot[b], beta[b], t[b], per_iter[b])
            for b in range(len(targets))]


def fit_shared_beta(model: BodyModel, targets: Sequence[FitTarget],
                    cfg: FitConfig = None) -> tuple[list[FitResult], np.ndarray]:
    """Fit several observations of one subject with a single shared shape.

    Rotation passes run independently per target; the shape solve stacks all
    targets into one least-squares system with a shared beta and per-target
    translation. Returns (per-target results, shared beta). All targets must
    cover the same vertex set.
    """
    cfg = cfg or FitConfig()
    if not targets:
        raise ValueError("need at least one target")
    prepared = [_prepare_single(model, t, cfg) for t in targets]
    subset0 = prepared[0][0]
    for p in prepared[1:]:
        if not np.array_equal(p[0], subset0):
            raise ValueError("shared-beta fitting requires identical vertex coverage")
        if (p[2] is None) != (prepared[0][2] is None):
            raise ValueError("shared-beta fitting requires uniform sigma availability")
    tv = np.stack([p[1] for p in prepared])
    tj = np.stack([t.joints for t in targets])
    sig = None if prepared[0][2] is None else np.stack([p[2] for p in prepared])
    rot, beta, t, per_iter = _fit_core(model, tv, tj, sig, cfg, subset0,
                                       shared_beta=True)
    results = [_finalize(model, targets[b], rot[b], beta[b], t[b], per_iter[b])
               for b in range(len(targets))]
    return results, beta[0]


def stratified_vertex_subset(model: BodyModel, n: int, seed: int = 0) -> np.ndarray:
    """Uniform stratified vertex subset: per-part quotas proportional to size.

    Every part keeps at least min(3, its size) vertices so each rotation fit
    stays well-determined. Deterministic in the seed; returned sorted.
    """
    if not 0 < n <= model.n_vertices:
        raise ValueError(f"subset size must be in 1..{model.n_vertices}")
    rng = np.random.default_rng(seed)
    lists = model.part_vertex_lists
    sizes = np.array([len(l) for l in lists])
    floor = np.minimum(sizes, 3)
    if floor.sum() > n:
        # tiny subsets: drop the per-part floor, fall back to proportional
        floor = np.zeros_like(floor)
    quota = floor.copy()
    raw = sizes / sizes.sum() * (n - floor.sum())
    quota = quota + np.floor(raw).astype(int)
    quota = np.minimum(quota, sizes)
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    deficit = n - quota.sum()
    i = 0
    while deficit > 0:
        k = order[i % len(order)]
        if quota[k] < sizes[k]:
            quota[k] += 1
            deficit -= 1
        i += 1
    picked = [rng.choice(lists[k], size=quota[k], replace=False)
              for k in range(model.n_parts) if quota[k] > 0]
    return np.sort(np.concatenate(picked))


def transfer_config(model: BodyModel, seed: int = 0,
                    base: FitConfig = None) -> FitConfig:
    """Model-transfer preset: no shape regularization, one iteration, and a
    4096-vertex subset (all vertices when the model is smaller)."""
    base = base or FitConfig()
    n = min(4096, model.n_vertices)
    subset = None if n == model.n_vertices else stratified_vertex_subset(model, n, seed)
    return replace(base, n_iters=1,
                   shape_cfg=replace(base.shape_cfg, ridge_lambda=0.0),
                   vertex_subset=subset)
