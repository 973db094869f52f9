"""Per-point geometric features and the KD-tree spatial index shared with the
geometric verification stage.

The index wraps scipy's cKDTree but pins down exact result-set semantics:
k-nearest and radius queries return precisely what a brute-force scan would,
with distance ties broken by point index. Queries are counted so tests can
assert the O(N log N) query budget of feature extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = ["SpatialIndex", "FeatureMatrix", "build_index", "extract_features"]

FEATURE_NAMES = (
    "linearity",
    "planarity",
    "scattering",
    "verticality",
    "height_above_local_min",
    "local_density",
    "z_extent",
    "centroid_offset",
)

DEFAULT_K_NEIGHBORS = 16
DEFAULT_HEIGHT_RADIUS = 5.0  # meters, XY disk for the local ground minimum
_EIG_EPS = 1e-12
_TIE_SLOP = 1e-9


class SpatialIndex:
    """Balanced KD-tree over 3D points with brute-force-exact query semantics."""

    def __init__(self, coords: np.ndarray, leaf_size: int = 16):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError("coords must be a nonempty N x 3 matrix")
        self.coords = coords
        self.leaf_size = leaf_size
        self._tree = cKDTree(coords, leafsize=leaf_size, balanced_tree=True)
        self.query_count = 0

    def __len__(self):
        return self.coords.shape[0]

    def _exact_candidates(self, q: np.ndarray, candidates) -> tuple:
        cand = np.asarray(candidates, dtype=np.int64)
        d2 = np.square(self.coords[cand] - q).sum(axis=1)
        order = np.lexsort((cand, d2))
        return cand[order], d2[order]

    def knn(self, queries: np.ndarray, k: int) -> tuple:
        """Indices and distances of the k nearest points per query row.

        Rows are ordered by (distance, index); boundary ties resolve to the
        lowest index, matching a full-scan oracle exactly.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self)
        k_eff = min(k, n)
        self.query_count += queries.shape[0]
        # Over-query by one to detect ties straddling the k-th boundary.
        probe = min(k_eff + 1, n)
        dist, idx = self._tree.query(queries, k=probe)
        dist = np.atleast_2d(dist)
        idx = np.atleast_2d(idx)
        out_idx = np.empty((queries.shape[0], k_eff), dtype=np.int64)
        out_d2 = np.empty((queries.shape[0], k_eff), dtype=np.float64)
        for row, q in enumerate(queries):
            boundary = dist[row, k_eff - 1]
            ambiguous = probe > k_eff and (
                dist[row, probe - 1] - boundary <= _TIE_SLOP * max(boundary, 1.0)
            )
            if ambiguous:
                r = boundary * (1.0 + _TIE_SLOP) + 1e-300
                cand = self._tree.query_ball_point(q, r)
                ci, cd2 = self._exact_candidates(q, cand)
            else:
                ci, cd2 = self._exact_candidates(q, idx[row, :k_eff])
            out_idx[row] = ci[:k_eff]
            out_d2[row] = cd2[:k_eff]
        return out_idx, np.sqrt(out_d2)

    def radius(self, query: np.ndarray, r: float) -> np.ndarray:
        """Indices of all points with Euclidean distance <= r, sorted by index."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        self.query_count += 1
        cand = np.asarray(
            self._tree.query_ball_point(q, r * (1.0 + _TIE_SLOP) + 1e-300),
            dtype=np.int64,
        )
        if cand.size == 0:
            return cand
        d2 = np.square(self.coords[cand] - q).sum(axis=1)
        return np.sort(cand[d2 <= r * r])


@dataclass(frozen=True)
class FeatureMatrix:
    """N x 8 per-point features; the desk-scale stand-in for learned embeddings."""

    feats: np.ndarray
    k_neighbors: int

    def __post_init__(self):
        feats = np.asarray(self.feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != len(FEATURE_NAMES):
            raise ValueError(f"feats must be N x {len(FEATURE_NAMES)}")
        if not np.isfinite(feats).all():
            raise ValueError("features must be finite")
        eig = feats[:, :3]
        if eig.min() < -1e-9 or eig.max() > 1.0 + 1e-9:
            raise ValueError("eigen-features must lie in [0, 1]")
        object.__setattr__(self, "feats", feats)

    def __len__(self):
        return self.feats.shape[0]

    @property
    def dim(self):
        return self.feats.shape[1]


def build_index(cloud, leaf_size: int = 16) -> SpatialIndex:
    coords = cloud.coords if hasattr(cloud, "coords") else cloud
    return SpatialIndex(coords, leaf_size=leaf_size)


def extract_features(
    cloud,
    index: SpatialIndex | None = None,
    k_neighbors: int = DEFAULT_K_NEIGHBORS,
    height_radius: float = DEFAULT_HEIGHT_RADIUS,
) -> FeatureMatrix:
    """Eigen-features, verticality, and height/density descriptors per point.

    Eigen-features come from the sorted eigenvalues l1 >= l2 >= l3 of the
    k-NN covariance: linearity (l1-l2)/l1, planarity (l2-l3)/l1, scattering
    l3/l1. Verticality is the |z| component of the least-variance
    eigenvector. Neighborhoods with l1 <= 1e-12 yield an all-zero row.
    """
    if k_neighbors < 3:
        raise ValueError("k_neighbors must be >= 3")
    coords = cloud.coords if hasattr(cloud, "coords") else np.asarray(cloud, float)
    if index is None:
        index = SpatialIndex(coords)
    n = coords.shape[0]
    nbr_idx, nbr_dist = index.knn(coords, k_neighbors)
    k_eff = nbr_idx.shape[1]

    nbrs = coords[nbr_idx]                            # N x k x 3
    centroid = nbrs.mean(axis=1)                      # N x 3
    centered = nbrs - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_eff
    eigvals, eigvecs = np.linalg.eigh(cov)            # ascending eigenvalues
    l3 = np.maximum(eigvals[:, 0], 0.0)
    l2 = np.maximum(eigvals[:, 1], 0.0)
    l1 = np.maximum(eigvals[:, 2], 0.0)
    ok = l1 > _EIG_EPS
    safe_l1 = np.where(ok, l1, 1.0)

    feats = np.zeros((n, len(FEATURE_NAMES)))
    feats[:, 0] = np.where(ok, (l1 - l2) / safe_l1, 0.0)
    feats[:, 1] = np.where(ok, (l2 - l3) / safe_l1, 0.0)
    feats[:, 2] = np.where(ok, l3 / safe_l1, 0.0)
    feats[:, 3] = np.where(ok, np.abs(eigvecs[:, 2, 0]), 0.0)

    # Local ground reference: minimum z inside an XY disk around each point.
    xy_tree = cKDTree(coords[:, :2])
    disk = xy_tree.query_ball_point(coords[:, :2], height_radius)
    z = coords[:, 2]
    local_min = np.array([z[members].min() for members in disk])
    feats[:, 4] = np.where(ok, z - local_min, 0.0)

    mean_dist = nbr_dist.mean(axis=1)
    feats[:, 5] = np.where(ok, 1.0 / (mean_dist + 1e-6), 0.0)
    feats[:, 6] = np.where(ok, nbrs[:, :, 2].max(axis=1) - nbrs[:, :, 2].min(axis=1), 0.0)
    feats[:, 7] = np.where(ok, np.linalg.norm(coords - centroid, axis=1), 0.0)

    feats[:, :3] = np.clip(feats[:, :3], 0.0, 1.0)
    return FeatureMatrix(feats=feats, k_neighbors=k_neighbors)
