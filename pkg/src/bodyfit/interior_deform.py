"""Deform body-interior points by precomputed sparse interpolation weights.

A point is represented by a convex combination of mesh vertices; posing the
mesh and applying the same weights carries the point along. Weight files are
the interchange format, so weights computed by any scheme (e.g. natural
neighbors) can be applied here; a k-nearest-neighbor inverse-distance
generator is included as a stand-in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.spatial import cKDTree

from .arrays_io import decode_array, encode_array, read_container, write_container


@dataclass
class InteriorWeightSet:
    """CSR-style sparse convex weights over mesh vertices.

    Point p uses vertices indices[indptr[p]:indptr[p+1]] with the matching
    weights, which are nonnegative and sum to 1. canonical_points stores each
    point's weight-reconstructed rest position (equal to the query position
    wherever the scheme interpolates exactly, e.g. on exact vertex hits).
    """

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    canonical_points: np.ndarray

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.canonical_points = np.asarray(self.canonical_points, dtype=np.float64)
        if self.indptr.ndim != 1 or self.indptr[0] != 0 or np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must start at 0 and be nondecreasing")
        if self.indices.shape != self.weights.shape:
            raise ValueError("indices and weights must align")
        if self.indptr[-1] != len(self.weights):
            raise ValueError("indptr[-1] must equal the number of stored weights")
        if np.any(self.weights < -1e-12):
            raise ValueError("weights must be nonnegative")
        sums = np.add.reduceat(self.weights, self.indptr[:-1]) if len(self.weights) else np.array([])
        empty = np.diff(self.indptr) == 0
        if np.any(empty):
            raise ValueError(f"point {np.flatnonzero(empty)[0]} has no weights")
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
        if bad.size:
            raise ValueError(f"point {bad[0]}'s weights sum to {sums[bad[0]]:.12f}, expected 1")

    @property
    def n_points(self) -> int:
        return len(self.indptr) - 1

    def as_csr(self, n_vertices: int) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix(
            (self.weights, self.indices, self.indptr),
            shape=(self.n_points, n_vertices))


def deform_points(weight_set: InteriorWeightSet, posed_vertices: np.ndarray) -> np.ndarray:
    """Apply the stored weights to posed vertices: out_p = sum_j w_pj v'_j."""
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    if posed_vertices.ndim != 2 or posed_vertices.shape[1] != 3:
        raise ValueError("posed_vertices must be (N_v, 3)")
    if weight_set.indices.size and weight_set.indices.max() >= len(posed_vertices):
        raise IndexError(
            f"weight refers to vertex {weight_set.indices.max()}, "
            f"only {len(posed_vertices)} available")
    return weight_set.as_csr(len(posed_vertices)) @ posed_vertices


def knn_idw_weights(canonical_vertices: np.ndarray, query_points: np.ndarray,
                    k: int = 8, power: float = 2.0) -> InteriorWeightSet:
    """Inverse-distance weights over the k nearest canonical vertices.

    Exact hits (distance 0) get a one-hot weight. This is a stand-in
    generator: it does not reproduce general linear fields exactly, and
    near-surface behavior depends only on vertex proximity.
    """
    canonical_vertices = np.asarray(canonical_vertices, dtype=np.float64)
    query_points = np.atleast_2d(np.asarray(query_points, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(canonical_vertices))
    dists, idx = cKDTree(canonical_vertices).query(query_points, k=k)
    dists = dists.reshape(len(query_points), k)
    idx = idx.reshape(len(query_points), k).astype(np.int64)

    exact = dists[:, 0] == 0.0
    with np.errstate(divide="ignore"):
        weights = dists ** (-power)
    weights[exact] = 0.0
    weights[exact, 0] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)

    n_q = len(query_points)
    wset = InteriorWeightSet(
        indptr=np.arange(n_q + 1, dtype=np.int64) * k,
        indices=idx.ravel(),
        weights=weights.ravel(),
        canonical_points=np.zeros((n_q, 3)),
    )
    # canonical position := the reconstruction at the rest pose
    wset.canonical_points = deform_points(wset, canonical_vertices)
    return wset


def save_weights(weight_set: InteriorWeightSet, path) -> None:
    write_container(path, "interior_weights", {
        "indptr": encode_array(weight_set.indptr),
        "indices": encode_array(weight_set.indices),
        "weights": encode_array(weight_set.weights),
        "canonical_points": encode_array(weight_set.canonical_points),
    })


def load_weights(path) -> InteriorWeightSet:
    doc = read_container(path, "interior_weights")
    return InteriorWeightSet(
        indptr=decode_array(doc["indptr"], "indptr"),
        indices=decode_array(doc["indices"], "indices"),
        weights=decode_array(doc["weights"], "weights"),
        canonical_points=decode_array(doc["canonical_points"], "canonical_points"),
    )
