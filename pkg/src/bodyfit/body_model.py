"""Parametric body model: file format, toy-model generator, kinematics, Jacobian.

The model is SMPL-family shaped: a template mesh, linear shape blendshapes,
a joint regressor, skinning weights and a kinematic tree. Pose is expressed
as one *global* rotation matrix per body part (part k pivots at joint k),
plus a shape vector and a translation. With rotations held fixed, posed
vertices and joints are exactly affine in (beta, t), which is what the
fitter's linear shape solve relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arrays_io import FileFormatError, decode_array, encode_array, read_container, write_container

ROOT_SENTINEL = -1


class ModelValidationError(ValueError):
    """A model file parsed but violates a structural invariant."""


@dataclass
class BodyModel:
    """Immutable body model definition.

    Attributes:
        template_vertices: (N_v, 3) canonical T-pose vertices, meters.
        shape_blendshapes: (N_v, 3, N_beta) meters per unit beta.
        joint_regressor: (N_j, N_v), rows sum to 1.
        skinning_weights: (N_v, N_j), rows nonnegative, sum to 1.
        parent: (N_j,) parent joint indices, parent[0] == ROOT_SENTINEL.
        part_joints: per part k, the joint indices belonging to that part.
    """

    template_vertices: np.ndarray
    shape_blendshapes: np.ndarray
    joint_regressor: np.ndarray
    skinning_weights: np.ndarray
    parent: np.ndarray
    part_joints: list[np.ndarray]
    part_vertex_index: np.ndarray = field(init=False)

    def __post_init__(self):
        # copy so freezing below cannot affect caller-owned arrays
        self.template_vertices = np.array(self.template_vertices, dtype=np.float64)
        self.shape_blendshapes = np.array(self.shape_blendshapes, dtype=np.float64)
        self.joint_regressor = np.array(self.joint_regressor, dtype=np.float64)
        self.skinning_weights = np.array(self.skinning_weights, dtype=np.float64)
        self.parent = np.array(self.parent, dtype=np.int64)
        self.part_joints = [np.asarray(pj, dtype=np.int64) for pj in self.part_joints]
        # ties broken by lowest part index: argmax returns the first maximum
        self.part_vertex_index = np.argmax(self.skinning_weights, axis=1)
        for arr in (self.template_vertices, self.shape_blendshapes, self.joint_regressor,
                    self.skinning_weights, self.parent, self.part_vertex_index):
            arr.flags.writeable = False
        self._cache: dict = {}

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def n_parts(self) -> int:
        return self.n_joints

    @property
    def n_betas(self) -> int:
        return self.shape_blendshapes.shape[2]

    @property
    def rest_joints(self) -> np.ndarray:
        """(N_j, 3) joints regressed from the unshaped template."""
        if "rest_joints" not in self._cache:
            self._cache["rest_joints"] = self.joint_regressor @ self.template_vertices
        return self._cache["rest_joints"]

    @property
    def joint_blendshapes(self) -> np.ndarray:
        """(N_j, 3, N_beta) shape derivative of the rest joints."""
        if "joint_blendshapes" not in self._cache:
            self._cache["joint_blendshapes"] = np.einsum(
                "jv,vcs->jcs", self.joint_regressor, self.shape_blendshapes
            )
        return self._cache["joint_blendshapes"]

    @property
    def part_vertex_lists(self) -> list[np.ndarray]:
        """Per part k, indices of vertices assigned to that part."""
        if "part_vertex_lists" not in self._cache:
            self._cache["part_vertex_lists"] = [
                np.flatnonzero(self.part_vertex_index == k) for k in range(self.n_joints)
            ]
        return self._cache["part_vertex_lists"]

    @property
    def children(self) -> list[np.ndarray]:
        if "children" not in self._cache:
            ch = [[] for _ in range(self.n_joints)]
            for j in range(1, self.n_joints):
                ch[self.parent[j]].append(j)
            self._cache["children"] = [np.asarray(c, dtype=np.int64) for c in ch]
        return self._cache["children"]

    def rest_joints_for(self, beta: np.ndarray) -> np.ndarray:
        """Rest-pose (unposed) joints for a shape vector, no translation."""
        return self.rest_joints + self.joint_blendshapes @ np.asarray(beta, dtype=np.float64)


@dataclass
class PoseParams:
    """Pose of a body model: global per-part rotations, shape, translation."""

    rotations: np.ndarray  # (N_parts, 3, 3)
    beta: np.ndarray       # (N_beta,)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotations.ndim != 3 or self.rotations.shape[1:] != (3, 3):
            raise ValueError(f"rotations must be (N_parts, 3, 3), got {self.rotations.shape}")
        if self.translation.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {self.translation.shape}")
        check_rotation_matrices(self.rotations)

    @classmethod
    def identity(cls, model: BodyModel) -> "PoseParams":
        return cls(
            rotations=np.tile(np.eye(3), (model.n_parts, 1, 1)),
            beta=np.zeros(model.n_betas),
            translation=np.zeros(3),
        )


def check_rotation_matrices(rotations: np.ndarray, tol: float = 1e-7) -> None:
    """Raise if any matrix fails R^T R = I or det(R) = +1 within tol."""
    rotations = np.asarray(rotations, dtype=np.float64)
    gram = np.einsum("...ji,...jk->...ik", rotations, rotations)
    ortho_err = np.abs(gram - np.eye(3)).max(axis=(-1, -2))
    det_err = np.abs(np.linalg.det(rotations) - 1.0)
    bad = np.flatnonzero((ortho_err > tol) | (det_err > tol))
    if bad.size:
        k = int(bad[0])
        raise ValueError(
            f"rotation {k} is not in SO(3): |R^T R - I| = {ortho_err.flat[k]:.3e}, "
            f"|det - 1| = {det_err.flat[k]:.3e}"
        )


def validate_model(model: BodyModel) -> None:
    """Check all structural invariants; raise ModelValidationError naming the offender."""
    n_v, n_j = model.n_vertices, model.n_joints
    if model.template_vertices.shape != (n_v, 3):
        raise ModelValidationError(f"template_vertices has shape {model.template_vertices.shape}")
    if model.shape_blendshapes.shape[:2] != (n_v, 3):
        raise ModelValidationError(f"shape_blendshapes has shape {model.shape_blendshapes.shape}")
    if model.joint_regressor.shape != (n_j, n_v):
        raise ModelValidationError(f"joint_regressor has shape {model.joint_regressor.shape}")
    if model.skinning_weights.shape != (n_v, n_j):
        raise ModelValidationError(f"skinning_weights has shape {model.skinning_weights.shape}")
    if model.parent.shape != (n_j,):
        raise ModelValidationError(f"parent has shape {model.parent.shape}")
    if len(model.part_joints) != n_j:
        raise ModelValidationError(f"part_joints has {len(model.part_joints)} entries, expected {n_j}")

    if np.any(model.skinning_weights < -1e-12):
        v = int(np.argwhere(model.skinning_weights < -1e-12)[0][0])
        raise ModelValidationError(f"skinning_weights row {v} has a negative entry")
    row_sums = model.skinning_weights.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-9)
    if bad.size:
        raise ModelValidationError(
            f"skinning_weights row {bad[0]} sums to {row_sums[bad[0]]:.12f}, expected 1"
        )
    reg_sums = model.joint_regressor.sum(axis=1)
    bad = np.flatnonzero(np.abs(reg_sums - 1.0) > 1e-9)
    if bad.size:
        raise ModelValidationError(
            f"joint_regressor row {bad[0]} sums to {reg_sums[bad[0]]:.12f}, expected 1"
        )

    if model.parent[0] != ROOT_SENTINEL:
        raise ModelValidationError(f"parent[0] must be the root sentinel {ROOT_SENTINEL}")
    for k in range(1, n_j):
        if not 0 <= model.parent[k] < k:
            raise ModelValidationError(
                f"parent[{k}] = {model.parent[k]} breaks topological order (need 0 <= parent < {k})"
            )

    expected = np.argmax(model.skinning_weights, axis=1)
    bad = np.flatnonzero(model.part_vertex_index != expected)
    if bad.size:
        raise ModelValidationError(f"part_vertex_index[{bad[0]}] is not the argmax skinning part")

    counts = np.zeros(n_j, dtype=np.int64)
    for k, joints in enumerate(model.part_joints):
        if joints.size and (joints.min() < 0 or joints.max() >= n_j):
            raise ModelValidationError(f"part_joints[{k}] contains an out-of-range joint index")
        counts[joints] += 1
    has_child = np.zeros(n_j, dtype=bool)
    has_child[model.parent[1:]] = True
    for j in range(1, n_j):
        if has_child[j] and counts[j] != 2:
            raise ModelValidationError(
                f"interior joint {j} appears in {counts[j]} part joint lists, expected 2"
            )


def save_model(model: BodyModel, path: str | Path) -> None:
    write_container(path, "body_model", {
        "template_vertices": encode_array(model.template_vertices),
        "shape_blendshapes": encode_array(model.shape_blendshapes),
        "joint_regressor": encode_array(model.joint_regressor),
        "skinning_weights": encode_array(model.skinning_weights),
        "parent": [int(p) for p in model.parent],
        "part_joints": [[int(j) for j in pj] for pj in model.part_joints],
    })


def load_model(path: str | Path) -> BodyModel:
    """Load and fully validate a body model file.

    Raises:
        FileFormatError: unreadable or wrongly-typed container.
        ModelValidationError: parsed but violates an invariant.
    """
    doc = read_container(path, "body_model")
    try:
        model = BodyModel(
            template_vertices=decode_array(doc["template_vertices"], "template_vertices"),
            shape_blendshapes=decode_array(doc["shape_blendshapes"], "shape_blendshapes"),
            joint_regressor=decode_array(doc["joint_regressor"], "joint_regressor"),
            skinning_weights=decode_array(doc["skinning_weights"], "skinning_weights"),
            parent=np.asarray(doc["parent"], dtype=np.int64),
            part_joints=[np.asarray(pj, dtype=np.int64) for pj in doc["part_joints"]],
        )
    except KeyError as exc:
        raise FileFormatError(f"{path}: missing field {exc}") from exc
    validate_model(model)
    return model


# ---------------------------------------------------------------------------
# Kinematics. The batched internals carry a leading batch axis throughout and
# are shared by the public single-instance API and the vectorized fitter.

def _forward_batch(model: BodyModel, rotations: np.ndarray, beta: np.ndarray,
                   translation: np.ndarray, vertex_subset: np.ndarray | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Pose the model. rotations (B,K,3,3), beta (B,N_beta), translation (B,3).

    With vertex_subset, only those vertex rows are produced (joints always
    come from the full regressed set, so kinematics are unaffected).
    """
    # rest joints via the precomputed regressed blendshapes: J(T0 + S b) = j0 + SJ b
    rest = model.rest_joints + np.einsum(
        "jcs,bs->bjc", model.joint_blendshapes, beta, optimize=True)

    posed = np.empty_like(rest)
    posed[:, 0] = rest[:, 0]
    for k in range(1, model.n_joints):
        p = model.parent[k]
        bone = rest[:, k] - rest[:, p]
        posed[:, k] = posed[:, p] + np.einsum("bij,bj->bi", rotations[:, p], bone)

    if vertex_subset is None:
        weights, template, blend = (model.skinning_weights, model.template_vertices,
                                    model.shape_blendshapes)
    else:
        weights = model.skinning_weights[vertex_subset]
        template = model.template_vertices[vertex_subset]
        blend = model.shape_blendshapes[vertex_subset]
    shaped = template + np.einsum("vcs,bs->bvc", blend, beta, optimize=True)

    # v' = sum_k w_vk (R_k (shaped_v - rest_k) + posed_k)
    blended_rot = np.einsum("vk,bkij->bvij", weights, rotations, optimize=True)
    pivot_term = posed - np.einsum("bkij,bkj->bki", rotations, rest)
    verts = (np.einsum("bvij,bvj->bvi", blended_rot, shaped, optimize=True)
             + np.einsum("vk,bki->bvi", weights, pivot_term, optimize=True))

    t = translation[:, None, :]
    return verts + t, posed + t


def _shape_affine_batch(model: BodyModel, rotations: np.ndarray,
                        vertex_subset: np.ndarray | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Affine expansion of the posed points in beta at fixed rotations.

    Returns (base, jac) with base (B, n_v+N_j, 3) the points at beta=0, t=0
    and jac (B, n_v+N_j, 3, N_beta) their exact shape derivative, vertices
    stacked before joints. n_v is the subset size when one is given.
    """
    B = rotations.shape[0]
    n_j, n_b = model.n_joints, model.n_betas
    j0 = model.rest_joints
    sj = model.joint_blendshapes

    joint_base = np.empty((B, n_j, 3))
    joint_jac = np.empty((B, n_j, 3, n_b))
    joint_base[:, 0] = j0[0]
    joint_jac[:, 0] = sj[0]
    for k in range(1, n_j):
        p = model.parent[k]
        joint_base[:, k] = joint_base[:, p] + (j0[k] - j0[p]) @ np.swapaxes(rotations[:, p], 1, 2)
        joint_jac[:, k] = joint_jac[:, p] + np.einsum(
            "bij,js->bis", rotations[:, p], sj[k] - sj[p])

    if vertex_subset is None:
        weights, template, blend = (model.skinning_weights, model.template_vertices,
                                    model.shape_blendshapes)
    else:
        weights = model.skinning_weights[vertex_subset]
        template = model.template_vertices[vertex_subset]
        blend = model.shape_blendshapes[vertex_subset]

    blended_rot = np.einsum("vk,bkij->bvij", weights, rotations, optimize=True)
    pivot_base = joint_base - np.einsum("bkij,kj->bki", rotations, j0)
    pivot_jac = joint_jac - np.einsum("bkij,kjs->bkis", rotations, sj, optimize=True)

    vert_base = (np.einsum("bvij,vj->bvi", blended_rot, template, optimize=True)
                 + np.einsum("vk,bki->bvi", weights, pivot_base, optimize=True))
    vert_jac = (np.einsum("bvij,vjs->bvis", blended_rot, blend, optimize=True)
                + np.einsum("vk,bkis->bvis", weights, pivot_jac, optimize=True))

    base = np.concatenate([vert_base, joint_base], axis=1)
    jac = np.concatenate([vert_jac, joint_jac], axis=1)
    return base, jac


def forward(model: BodyModel, pose: PoseParams) -> tuple[np.ndarray, np.ndarray]:
    """Pose the model, returning (vertices (N_v,3), joints (N_j,3)) in meters."""
    if pose.rotations.shape[0] != model.n_parts:
        raise ValueError(
            f"pose has {pose.rotations.shape[0]} rotations, model has {model.n_parts} parts")
    if pose.beta.shape != (model.n_betas,):
        raise ValueError(f"beta has shape {pose.beta.shape}, model expects ({model.n_betas},)")
    verts, joints = _forward_batch(
        model, pose.rotations[None], pose.beta[None], pose.translation[None])
    return verts[0], joints[0]


def shape_jacobian(model: BodyModel, rotations: np.ndarray) -> np.ndarray:
    """Exact Jacobian of stacked [vertices; joints] w.r.t. (beta, t).

    Shape (3*(N_v+N_j), N_beta+3); rows are xyz-interleaved per point,
    vertices first. The translation columns are tiled 3x3 identities. Since
    the posed points are affine in (beta, t) at fixed rotations, this
    Jacobian is exact, not a linearization.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.shape != (model.n_parts, 3, 3):
        raise ValueError(f"rotations must be ({model.n_parts}, 3, 3), got {rotations.shape}")
    _, jac = _shape_affine_batch(model, rotations[None])
    n_pts = model.n_vertices + model.n_joints
    full = np.empty((3 * n_pts, model.n_betas + 3))
    full[:, :model.n_betas] = jac[0].reshape(3 * n_pts, model.n_betas)
    full[:, model.n_betas:] = np.tile(np.eye(3), (n_pts, 1))
    return full


def parent_relative_rotations(model: BodyModel, rotations: np.ndarray) -> np.ndarray:
    """Convert global part rotations to parent-relative ones (root unchanged)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    rel = rotations.copy()
    for k in range(1, model.n_joints):
        rel[k] = rotations[model.parent[k]].T @ rotations[k]
    return rel


# ---------------------------------------------------------------------------
# Toy model generation. Stand-in for licensed SMPL-family assets: a humanoid
# chain/tree model with smooth skinning, deterministic in the seed.

# (parent, offset from parent). Any prefix of this table is a valid tree.
_HUMANOID = [
    (ROOT_SENTINEL, (0.00, 0.00, 0.00)),   # 0 pelvis
    (0, (0.00, 0.16, 0.00)),               # 1 spine
    (1, (0.00, 0.16, 0.00)),               # 2 chest
    (2, (0.00, 0.22, 0.00)),               # 3 neck/head
    (0, (0.09, -0.07, 0.00)),              # 4 left hip
    (4, (0.01, -0.38, 0.00)),              # 5 left knee
    (5, (0.00, -0.40, 0.02)),              # 6 left ankle
    (0, (-0.09, -0.07, 0.00)),             # 7 right hip
    (7, (-0.01, -0.38, 0.00)),             # 8 right knee
    (8, (0.00, -0.40, 0.02)),              # 9 right ankle
    (2, (0.17, 0.09, 0.00)),               # 10 left shoulder
    (10, (0.26, 0.00, 0.00)),              # 11 left elbow
    (11, (0.25, 0.00, 0.00)),              # 12 left wrist
    (2, (-0.17, 0.09, 0.00)),              # 13 right shoulder
    (13, (-0.26, 0.00, 0.00)),             # 14 right elbow
    (14, (-0.25, 0.00, 0.00)),             # 15 right wrist
]

_TORSO_RADIUS = 0.11
_LIMB_RADIUS = 0.05


def _toy_skeleton(n_joints: int) -> tuple[np.ndarray, np.ndarray]:
    """Parents and T-pose joint positions for the n_joints-joint humanoid."""
    parents = [p for p, _ in _HUMANOID[:n_joints]]
    pos = []
    for k in range(min(n_joints, len(_HUMANOID))):
        p, off = _HUMANOID[k]
        pos.append(np.asarray(off) + (pos[p] if p != ROOT_SENTINEL else 0.0))
    # extra joints extend extremity chains (head, wrists, ankles) round-robin
    tips = [t for t in (3, 12, 15, 6, 9) if t < n_joints] or [n_joints - 1]
    tip_dirs = {}
    for i, t in enumerate(tips):
        par = parents[t] if parents[t] != ROOT_SENTINEL else t
        d = pos[t] - pos[par]
        norm = np.linalg.norm(d)
        tip_dirs[t] = d / norm if norm > 0 else np.array([0.0, 1.0, 0.0])
    for k in range(len(_HUMANOID), n_joints):
        t = tips[(k - len(_HUMANOID)) % len(tips)]
        parents.append(t)
        pos.append(pos[t] + 0.08 * tip_dirs[t])
        tip_dirs[k] = tip_dirs[t]
        tips[(k - len(_HUMANOID)) % len(tips)] = k
    return np.asarray(parents, dtype=np.int64), np.asarray(pos)


def _frame_perp(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _shape_modes(template: np.ndarray, radial: np.ndarray, joints: np.ndarray,
                 n_beta: int, rng: np.random.Generator) -> np.ndarray:
    """Structured anatomical shape modes, meters per unit beta.

    The first two modes are overall size and height; the rest alter torso
    width/depth, girth, limb lengths, head size, belly and shoulder width.
    All act as smooth stretch-like fields (near-symmetric local Jacobians),
    the kind of deformation linear shape spaces of bodies are made of.
    """
    x, y, z = template.T
    cx, cy, cz = joints[0]
    blend = np.zeros((len(template), 3, n_beta))

    def window(lo, hi, soft=0.06):
        return (_smoothstep((y - lo) / soft) * _smoothstep((hi - y) / soft))

    modes = []
    modes.append(0.05 * (template - joints[0]))                      # overall size
    height = np.zeros((len(template), 3))
    height[:, 1] = 0.05 * (y - cy)
    modes.append(height)                                             # height
    torso = window(-0.04, 0.40)
    width = np.zeros((len(template), 3))
    width[:, 0] = 0.04 * (x - cx) * torso
    modes.append(width)                                              # torso width
    depth = np.zeros((len(template), 3))
    depth[:, 2] = 0.04 * (z - cz) * torso
    modes.append(depth)                                              # torso depth
    modes.append(0.015 * radial)                                     # girth
    legs = np.zeros((len(template), 3))
    s_leg = _smoothstep((-0.02 - y) / 0.08)
    legs[:, 1] = 0.05 * s_leg * (y + 0.02)
    modes.append(legs)                                               # leg length
    arms = np.zeros((len(template), 3))
    s_arm = _smoothstep((np.abs(x) - 0.14) / 0.08)
    arms[:, 0] = 0.06 * np.sign(x) * s_arm * (np.abs(x) - 0.14)
    modes.append(arms)                                               # arm length
    head = 0.08 * _smoothstep((y - 0.36) / 0.08)[:, None] * (template - joints[min(3, len(joints) - 1)])
    modes.append(head)                                               # head size
    belly = np.zeros((len(template), 3))
    belly[:, 2] = 0.05 * (z - cz) * np.exp(-((y - 0.12) / 0.12) ** 2)
    modes.append(belly)                                              # belly depth
    shoulders = np.zeros((len(template), 3))
    shoulders[:, 0] = 0.03 * np.sign(x) * _smoothstep((np.abs(x) - 0.04) / 0.1) * window(0.2, 0.5)
    modes.append(shoulders)                                          # shoulder width

    for b in range(min(n_beta, len(modes))):
        blend[:, :, b] = modes[b]
    # extra modes beyond the structured set: gentle low-frequency stretches
    for b in range(len(modes), n_beta):
        f = rng.normal(0.0, 1.5, 3)
        fhat = f / np.linalg.norm(f)
        amp = 0.01 / (1.0 + 0.2 * (b - len(modes)))
        blend[:, :, b] = amp * np.sin(template @ f + rng.uniform(0, 2 * np.pi))[:, None] * fhat
    return blend


def make_toy_model(seed: int, n_verts: int = 602, n_joints: int = 16,
                   n_beta: int = 10) -> BodyModel:
    """Generate a deterministic humanoid toy model.

    The skeleton is a pelvis-rooted tree with a spine chain and two arm and
    two leg chains. Vertices are rings around each bone plus caps at the end
    effectors; skinning weights blend smoothly between the bone's own joint
    and its neighbors, so the argmax-part assignment follows the bones. Shape
    blendshape 0 scales the whole body, blendshape 1 stretches height, the
    rest are smooth low-frequency fields.

    Deterministic in (seed, n_verts, n_joints, n_beta): same inputs give a
    bit-identical model.
    """
    if n_joints < 2:
        raise ValueError("n_joints must be >= 2")
    if n_verts < 4 * n_joints:
        raise ValueError(f"n_verts must be >= 4*n_joints = {4 * n_joints}")

    rng = np.random.default_rng(seed)
    parents, joints = _toy_skeleton(n_joints)
    children = [[] for _ in range(n_joints)]
    for j in range(1, n_joints):
        children[parents[j]].append(j)

    torso = {0, 1, 2} & set(range(n_joints))

    # segments owned by part k: its bones toward children, or a cap for leaves
    def part_segments(k):
        segs = []
        for c in children[k]:
            segs.append(("bone", k, c, joints[c] - joints[k]))
        if not children[k]:
            p = parents[k]
            d = joints[k] - joints[p] if p != ROOT_SENTINEL else np.array([0.0, 1.0, 0.0])
            norm = np.linalg.norm(d)
            d = d / norm if norm > 0 else np.array([0.0, 1.0, 0.0])
            segs.append(("cap", k, p, 0.09 * d))
        return segs

    def largest_remainder(weights, total):
        weights = np.asarray(weights, dtype=np.float64)
        raw = weights / weights.sum() * total
        counts = np.floor(raw).astype(int)
        order = np.argsort(-(raw - counts), kind="stable")
        for i in range(total - counts.sum()):
            counts[order[i % len(order)]] += 1
        return counts

    segments = [part_segments(k) for k in range(n_joints)]
    part_len = [sum(np.linalg.norm(s[3]) for s in segs) for segs in segments]
    quota = 4 + largest_remainder(part_len, n_verts - 4 * n_joints)

    positions = []
    radials = []  # per-vertex unit offset from its bone axis, for the girth mode
    weights = np.zeros((n_verts, n_joints))
    v = 0
    golden = 2.399963229728653
    for k in range(n_joints):
        segs = segments[k]
        seg_counts = largest_remainder([np.linalg.norm(s[3]) for s in segs], quota[k])
        radius = _TORSO_RADIUS if k in torso else _LIMB_RADIUS
        for (kind, a, b, vec), cnt in zip(segs, seg_counts):
            if cnt == 0:
                continue
            length = np.linalg.norm(vec)
            axis = vec / length
            u, w = _frame_perp(axis)
            s = (np.arange(cnt) + 0.5) / cnt
            theta = golden * np.arange(v, v + cnt) + rng.normal(0, 0.05, cnt)
            jitter = rng.normal(0, 0.002, (cnt, 3))
            ring = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * w
            if kind == "bone":
                r = radius * (0.8 + 0.2 * np.cos(2 * theta) ** 2)
                pts = joints[a] + s[:, None] * vec + r[:, None] * ring + jitter
                radials.append(ring)
                # mostly rigid, blending only in narrow zones around the two
                # joints; the bone's own joint keeps the argmax everywhere
                w_child = 0.48 * _smoothstep((s - 0.8) / 0.2)
                if parents[a] != ROOT_SENTINEL:
                    w_parent = 0.48 * _smoothstep((0.15 - s) / 0.15)
                    weights[v:v + cnt, parents[a]] = w_parent
                else:
                    w_parent = 0.0
                weights[v:v + cnt, b] = w_child
                weights[v:v + cnt, a] = 1.0 - w_child - w_parent
            else:  # cap: hemisphere of points beyond the leaf joint
                phi = np.arccos(1 - s)  # denser near the tip axis
                pts = (joints[a] + (0.3 + 0.7 * s)[:, None] * vec
                       + (radius * np.sin(phi))[:, None] * ring + jitter)
                radials.append(np.sin(phi)[:, None] * ring + np.cos(phi)[:, None] * axis)
                weights[v:v + cnt, a] = 0.9
                weights[v:v + cnt, b] = 0.1
            positions.append(pts)
            v += cnt
    template = np.concatenate(positions, axis=0)
    radial = np.concatenate(radials, axis=0)
    weights /= weights.sum(axis=1, keepdims=True)

    # joint regressor: uniform average of the nearest ring vertices
    n_near = min(10, n_verts)
    regressor = np.zeros((n_joints, n_verts))
    for j in range(n_joints):
        d = np.linalg.norm(template - joints[j], axis=1)
        nearest = np.argsort(d, kind="stable")[:n_near]
        regressor[j, nearest] = 1.0 / n_near

    blend = _shape_modes(template, radial, joints, n_beta, rng)

    part_joint_lists = [np.asarray([k] + children[k], dtype=np.int64) for k in range(n_joints)]
    model = BodyModel(
        template_vertices=template,
        shape_blendshapes=blend,
        joint_regressor=regressor,
        skinning_weights=weights,
        parent=parents,
        part_joints=part_joint_lists,
    )
    validate_model(model)
    return model
