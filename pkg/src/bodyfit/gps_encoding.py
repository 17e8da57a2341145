"""Volumetric Laplacian eigenbasis on tetrahedral meshes and point signatures.

Linear (P1) finite elements give the stiffness/mass pair (K, M) of the
Laplacian with natural (Neumann) boundary conditions. The signature of an
interior point stacks the barycentrically-interpolated eigenfunctions scaled
by inverse square-root eigenvalues; the constant zero-eigenvalue mode is
discarded. A fixed sin/cos feature basis with a ridge readout provides a
cheap smooth interpolant of the signatures over the whole volume.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from itertools import permutations

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.spatial import cKDTree

from .arrays_io import decode_array, encode_array, read_container, write_container
from .shape_solver import ridge_solve

_DENSE_EIG_LIMIT = 1500


class PointOutsideMeshError(ValueError):
    def __init__(self, point, distance):
        super().__init__(
            f"point {np.asarray(point).tolist()} lies outside the mesh "
            f"(nearest tet is {distance:.6g} m away)")
        self.distance = distance


@dataclass
class TetMesh:
    """Tetrahedral mesh with consistently oriented (positive-volume) tets."""

    nodes: np.ndarray  # (n, 3)
    tets: np.ndarray   # (m, 4)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise ValueError("nodes must be (n, 3)")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise ValueError("tets must be (m, 4)")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.nodes)):
            raise ValueError("tet node index out of range")
        vols = self.volumes()
        bad = np.flatnonzero(vols <= 0)
        if bad.size:
            raise ValueError(
                f"tet {bad[0]} has non-positive signed volume {vols[bad[0]]:.3e}; "
                "the mesh must be consistently oriented")
        self._cache: dict = {}

    def edge_matrices(self) -> np.ndarray:
        """(m, 3, 3) column matrices [v1-v0 | v2-v0 | v3-v0]."""
        v = self.nodes[self.tets]
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=2)

    def volumes(self) -> np.ndarray:
        return np.linalg.det(self.edge_matrices()) / 6.0

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.tets).tobytes())
        return h.hexdigest()

    def _locator(self):
        if "locator" not in self._cache:
            e = self.edge_matrices()
            inv = np.linalg.inv(e)
            v0 = self.nodes[self.tets[:, 0]]
            centroids = self.nodes[self.tets].mean(axis=1)
            spread = np.linalg.norm(
                self.nodes[self.tets] - centroids[:, None], axis=2).max()
            self._cache["locator"] = (inv, v0, cKDTree(centroids), spread)
        return self._cache["locator"]

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing tet index and barycentric coords (lam1..lam3) per point.

        Raises PointOutsideMeshError for the first point not inside any tet.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inv, v0, tree, spread = self._locator()
        k = min(len(self.tets), 48)
        _, cand = tree.query(points, k=k)
        cand = np.atleast_2d(cand)
        tet_idx = np.empty(len(points), dtype=np.int64)
        bary = np.empty((len(points), 3))
        for i, p in enumerate(points):
            c = cand[i]
            lam = np.einsum("mij,mj->mi", inv[c], p - v0[c])
            lam0 = 1.0 - lam.sum(axis=1)
            inside = np.flatnonzero(
                (lam.min(axis=1) >= -1e-10) & (lam0 >= -1e-10))
            if inside.size == 0:
                # rare fallback: exhaustive test before declaring "outside"
                lam_all = np.einsum("mij,mj->mi", inv, p - v0)
                lam0_all = 1.0 - lam_all.sum(axis=1)
                ok = np.flatnonzero((lam_all.min(axis=1) >= -1e-10) & (lam0_all >= -1e-10))
                if ok.size == 0:
                    raise PointOutsideMeshError(p, self._distance_to_mesh(p))
                t = int(ok[0])
                tet_idx[i] = t
                bary[i] = lam_all[t]
            else:
                # lowest tet index for points on shared faces, for determinism
                t = int(min(c[j] for j in inside))
                tet_idx[i] = t
                bary[i] = np.einsum("ij,j->i", inv[t], p - v0[t])
        return tet_idx, bary

    def _distance_to_mesh(self, p: np.ndarray) -> float:
        inv, v0, tree, spread = self._locator()
        k = min(len(self.tets), 16)
        _, cand = tree.query(p, k=k)
        cand = np.atleast_1d(cand)
        best = np.inf
        faces = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        for t in cand:
            corners = self.nodes[self.tets[t]]
            for f in faces:
                best = min(best, _point_triangle_distance(p, corners[list(f)]))
        return float(best)


def _point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> float:
    """Exact distance from a point to a triangle (projection + edge clamping)."""
    a, b, c = tri
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return float(np.linalg.norm(ap))
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return float(np.linalg.norm(bp))
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return float(np.linalg.norm(cp))
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return float(np.linalg.norm(p - (a + v * ab)))
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return float(np.linalg.norm(p - (a + w * ac)))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return float(np.linalg.norm(p - (b + w * (c - b))))
    n = np.cross(ab, ac)
    return float(abs(ap @ n) / np.linalg.norm(n))


def make_box_mesh(resolution: int, size: float = 1.0,
                  origin: tuple = (0.0, 0.0, 0.0)) -> TetMesh:
    """Axis-aligned box split into a grid of cubes, six tets each (Kuhn split).

    resolution cubes per edge gives (resolution+1)^3 nodes.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    r = resolution
    axes = [np.linspace(0.0, size, r + 1) + o for o in origin]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    nodes = grid.reshape(-1, 3)

    def nid(i, j, k):
        return (i * (r + 1) + j) * (r + 1) + k

    corner_paths = []
    for perm in permutations(range(3)):
        steps = np.zeros((4, 3), dtype=np.int64)
        for s, axis in enumerate(perm):
            steps[s + 1] = steps[s]
            steps[s + 1, axis] += 1
        parity = _permutation_parity(perm)
        if parity < 0:
            steps[[2, 3]] = steps[[3, 2]]
        corner_paths.append(steps)

    tets = []
    for i in range(r):
        for j in range(r):
            for k in range(r):
                for steps in corner_paths:
                    tets.append([nid(i + s[0], j + s[1], k + s[2]) for s in steps])
    return TetMesh(nodes=nodes, tets=np.asarray(tets, dtype=np.int64))


def _permutation_parity(perm) -> int:
    inv = sum(1 for i in range(3) for j in range(i + 1, 3) if perm[i] > perm[j])
    return -1 if inv % 2 else 1


def fem_laplacian(mesh: TetMesh) -> tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """P1 stiffness and consistent mass matrices of the mesh Laplacian.

    K is symmetric positive semidefinite with the constants in its nullspace
    (natural/Neumann boundary); M is symmetric positive definite.
    """
    e = mesh.edge_matrices()
    vols = np.linalg.det(e) / 6.0
    if np.any(vols < 1e-12):
        t = int(np.argmax(vols < 1e-12))
        raise ValueError(f"tet {t} is degenerate (volume {vols[t]:.3e} m^3)")
    inv = np.linalg.inv(e)
    grads = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)  # (m, 4, 3)

    k_local = vols[:, None, None] * np.einsum("mic,mjc->mij", grads, grads)
    m_local = vols[:, None, None] / 20.0 * (np.ones((4, 4)) + np.eye(4))

    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    n = len(mesh.nodes)
    stiffness = scipy.sparse.coo_matrix(
        (k_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mass = scipy.sparse.coo_matrix(
        (m_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return stiffness, mass


@dataclass
class TetEigenbasis:
    """Laplacian eigenpairs sampled at mesh nodes, constant mode removed.

    eigenvalues are ascending and start at the first nonzero mode;
    eigenvectors are M-orthonormal node samples, one column per mode, with
    the sign gauge fixed so each column's largest-magnitude entry is positive.
    """

    eigenvalues: np.ndarray   # (M,)
    eigenvectors: np.ndarray  # (n, M)
    mesh: TetMesh

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        self.eigenvectors = np.asarray(self.eigenvectors, dtype=np.float64)
        if self.eigenvalues.ndim != 1 or self.eigenvalues.size < 1:
            raise ValueError("need at least one eigenvalue")
        if np.any(np.diff(self.eigenvalues) < -1e-12):
            raise ValueError("eigenvalues must be ascending")
        if self.eigenvectors.shape != (len(self.mesh.nodes), self.eigenvalues.size):
            raise ValueError("eigenvectors must be (n_nodes, n_modes)")


def eigenbasis(stiffness, mass, n_modes: int, mesh: TetMesh) -> TetEigenbasis:
    """Smallest-n_modes nonzero solutions of K phi = lambda M phi.

    Solves for n_modes+1 pairs and discards the near-zero constant mode.
    Dense LAPACK below ~1500 nodes, ARPACK shift-invert above (with a fixed
    start vector, so results are deterministic).
    """
    n = stiffness.shape[0]
    if n_modes < 1 or n_modes + 1 >= n:
        raise ValueError(f"n_modes must be in 1..{n - 2}")
    k = n_modes + 1
    if n <= _DENSE_EIG_LIMIT:
        vals, vecs = scipy.linalg.eigh(
            stiffness.toarray(), mass.toarray(), subset_by_index=[0, k - 1])
    else:
        rng = np.random.default_rng(12345)
        v0 = rng.standard_normal(n)
        sigma = -0.01
        vals, vecs = scipy.sparse.linalg.eigsh(
            stiffness, k=k, M=mass, sigma=sigma, which="LM", v0=v0)
        order = np.argsort(vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]

    if abs(vals[0]) > 1e-6 * max(abs(vals[1]), 1.0):
        raise ValueError(
            f"expected a near-zero constant mode, got lambda_0 = {vals[0]:.3e}")
    vals, vecs = vals[1:], vecs[:, 1:]

    # gauge: make each eigenfunction's largest-magnitude node sample positive
    flip = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(vecs.shape[1])])
    vecs = vecs * flip

    gram = vecs.T @ (mass @ vecs)
    if np.abs(gram - np.eye(n_modes)).max() > 1e-6:
        raise ValueError("eigensolver did not return an M-orthonormal basis")
    return TetEigenbasis(eigenvalues=vals, eigenvectors=vecs, mesh=mesh)


def gps(basis: TetEigenbasis, points: np.ndarray) -> np.ndarray:
    """Global point signature: phi_i(p) / sqrt(lambda_i) for each mode.

    points may be a single (3,) point or (q, 3); the result matches. Each
    point must lie inside the mesh (barycentric containment test).
    """
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = np.atleast_2d(points)
    tet_idx, bary = basis.mesh.locate(pts)
    corner_vals = basis.eigenvectors[basis.mesh.tets[tet_idx]]  # (q, 4, M)
    full_bary = np.column_stack([1.0 - bary.sum(axis=1), bary])  # (q, 4)
    interp = np.einsum("qc,qcm->qm", full_bary, corner_vals)
    sig = interp / np.sqrt(basis.eigenvalues)
    return sig[0] if single else sig


def fourier_features(freqs: np.ndarray, bias: np.ndarray, points: np.ndarray) -> np.ndarray:
    """[sin(B p + b); cos(B p + b)] features, (2F,) per point."""
    freqs = np.asarray(freqs, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    phase = np.atleast_2d(points) @ freqs.T + bias
    feats = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
    return feats[0] if single else feats


def make_fourier_basis(n_features: int, scale: float, seed: int = 0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Random frequency matrix (F, 3) and bias, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, scale, (n_features, 3)), rng.uniform(0, 2 * np.pi, n_features)


def fit_readout(features: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    """Ridge-regression readout W with features @ W ~= targets.

    Needs at least as many samples as feature channels.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if features.shape[0] < features.shape[1]:
        raise ValueError(
            f"need >= {features.shape[1]} samples to fit the readout, "
            f"got {features.shape[0]}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    return ridge_solve(features, targets, np.full(features.shape[1], float(ridge)))


# ---------------------------------------------------------------------------
# Files

def save_mesh(mesh: TetMesh, path) -> None:
    write_container(path, "tet_mesh", {
        "nodes": encode_array(mesh.nodes),
        "tets": encode_array(mesh.tets),
    })


def load_mesh(path) -> TetMesh:
    doc = read_container(path, "tet_mesh")
    return TetMesh(nodes=decode_array(doc["nodes"], "nodes"),
                   tets=decode_array(doc["tets"], "tets"))


def save_basis(basis: TetEigenbasis, path) -> None:
    write_container(path, "eigen_basis", {
        "eigenvalues": encode_array(basis.eigenvalues),
        "eigenvectors": encode_array(basis.eigenvectors),
        "mesh_hash": basis.mesh.content_hash(),
    })


def load_basis(path, mesh: TetMesh) -> TetEigenbasis:
    doc = read_container(path, "eigen_basis")
    if doc["mesh_hash"] != mesh.content_hash():
        raise ValueError(
            "eigenbasis cache was built for a different mesh (hash mismatch)")
    return TetEigenbasis(
        eigenvalues=decode_array(doc["eigenvalues"], "eigenvalues"),
        eigenvectors=decode_array(doc["eigenvectors"], "eigenvectors"),
        mesh=mesh)
