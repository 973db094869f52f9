"""Sampling regimes: voxel-grid downsampling, point-budget random crop, sphere
crop, and the inverse mapping that lifts downsampled predictions back to full
resolution.

All functions are pure in (inputs, seed); callers may parallelize per scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from corrseg.model import CorrsegError, LabeledCloud, ProbabilityField

__all__ = [
    "GridSampleResult",
    "CropSpec",
    "grid_sample",
    "random_crop",
    "sphere_crop",
    "tile_sphere_centers",
    "lift_predictions",
]

DEFAULT_GRID_SIZE = 0.25      # meters, whole-scene branch setting
DEFAULT_N_MAX = 4_000_000     # point budget for the whole-scene branch
DEFAULT_K_LOCAL = 120_000     # retention cap for local sphere crops


@dataclass(frozen=True)
class GridSampleResult:
    """One representative point per occupied voxel plus the inverse index map."""

    sampled: LabeledCloud
    inverse: np.ndarray             # original index -> row in sampled
    grid_size: float
    representative_indices: np.ndarray  # row in sampled -> original index


@dataclass(frozen=True)
class CropSpec:
    n_max: int = DEFAULT_N_MAX
    k_local: int = DEFAULT_K_LOCAL
    seed: int = 0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.k_local < 1:
            raise ValueError("k_local must be >= 1")


def _voxel_keys(coords: np.ndarray, s: float) -> np.ndarray:
    # Grid anchored at the world origin: floor handles negative coordinates
    # symmetrically, and a fixed anchor keeps repeated downsampling idempotent
    # (representatives of distinct voxels can never merge under the same grid).
    return np.floor(coords / s).astype(np.int64)


def grid_sample(
    cloud: LabeledCloud, s: float, majority_labels: bool = False
) -> GridSampleResult:
    """Downsample to one representative per s-meter voxel.

    The representative is the point nearest its voxel centroid (ties break to
    the lowest point index). Labels follow the representative point unless
    majority_labels is set, which takes the per-voxel majority vote (ties to
    the lowest class ID).
    """
    if s <= 0:
        raise ValueError("grid size must be positive")
    coords = cloud.coords
    keys = _voxel_keys(coords, s)
    voxels, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    centroids = (voxels[inv] + 0.5) * s
    d2 = np.square(coords - centroids).sum(axis=1)
    n = len(cloud)
    order = np.lexsort((np.arange(n), d2, inv))
    first = np.searchsorted(inv[order], np.arange(len(voxels)), side="left")
    rep_idx = order[first]

    sampled = cloud.select(rep_idx)
    if majority_labels and cloud.labels is not None:
        labels = cloud.labels.astype(np.int64)
        num_classes = int(labels.max()) + 1
        counts = np.zeros((len(voxels), num_classes), dtype=np.int64)
        np.add.at(counts, (inv, labels), 1)
        maj = counts.argmax(axis=1).astype(np.uint16)
        sampled = LabeledCloud(
            coords=sampled.coords,
            colors=sampled.colors,
            labels=maj,
            scene_id=sampled.scene_id,
        )
    return GridSampleResult(
        sampled=sampled,
        inverse=inv.astype(np.int64),
        grid_size=float(s),
        representative_indices=rep_idx.astype(np.int64),
    )


def random_crop(cloud: LabeledCloud, spec: CropSpec) -> LabeledCloud:
    """Uniform subsample of exactly n_max points when over budget.

    Seeded partial Fisher-Yates: exact uniformity with O(n_max) draws.
    Selected indices are emitted in ascending order so point order stays
    stable relative to the input.
    """
    n = len(cloud)
    if n <= spec.n_max:
        return cloud
    rng = np.random.default_rng(spec.seed)
    n_max = spec.n_max
    idx = np.arange(n)
    steps = np.arange(n_max)
    draws = steps + (rng.random(n_max) * (n - steps)).astype(np.int64)
    for i in range(n_max):
        j = draws[i]
        idx[i], idx[j] = idx[j], idx[i]
    return cloud.select(np.sort(idx[:n_max]))


def sphere_crop(cloud: LabeledCloud, center, k_local: int):
    """The k_local points nearest center (all points if N <= k_local).

    Distance ties break to the lower point index. Returns the cropped cloud
    and the original indices of its points (ascending).
    """
    if k_local < 1:
        raise ValueError("k_local must be >= 1")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    n = len(cloud)
    if n <= k_local:
        indices = np.arange(n, dtype=np.int64)
        return cloud, indices
    d2 = np.square(cloud.coords - center).sum(axis=1)
    order = np.lexsort((np.arange(n), d2))
    indices = np.sort(order[:k_local]).astype(np.int64)
    return cloud.select(indices), indices


def tile_sphere_centers(cloud: LabeledCloud, k_local: int, overlap: float = 0.25) -> np.ndarray:
    """Deterministic crop centers that tile a scene for sphere-crop inference.

    Centers sit on a uniform XY grid whose spacing gives neighboring crops at
    least the requested radius overlap; a repair pass then appends a center at
    the lowest-index point left uncovered, so every point lands in at least
    one crop regardless of density variation.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    coords = cloud.coords
    n = len(cloud)
    z_mid = 0.5 * (coords[:, 2].min() + coords[:, 2].max())
    if n <= k_local:
        c = coords.mean(axis=0)
        return np.array([[c[0], c[1], z_mid]])

    # Probe crop at the XY bbox center to estimate the crop radius at the
    # scene's typical density.
    lo = coords[:, :2].min(axis=0)
    hi = coords[:, :2].max(axis=0)
    probe = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, z_mid])
    _, probe_idx = sphere_crop(cloud, probe, k_local)
    r_est = float(np.sqrt(np.square(coords[probe_idx] - probe).sum(axis=1).max()))
    r_est = max(r_est, 1e-6)
    step = 2.0 * r_est * (1.0 - overlap)

    xs = np.arange(lo[0], hi[0] + step, step)
    ys = np.arange(lo[1], hi[1] + step, step)
    gx, gy = np.meshgrid(xs, ys)
    centers = [np.array([x, y, z_mid]) for x, y in zip(gx.ravel(), gy.ravel())]

    covered = np.zeros(n, dtype=bool)
    for c in centers:
        _, idx = sphere_crop(cloud, c, k_local)
        covered[idx] = True
    while not covered.all():
        i = int(np.argmin(covered))  # lowest uncovered point index
        c = coords[i].copy()
        centers.append(c)
        _, idx = sphere_crop(cloud, c, k_local)
        covered[idx] = True
    return np.vstack(centers)


def lift_predictions(field: ProbabilityField, inverse: np.ndarray) -> ProbabilityField:
    """Lift a field over sampled points back to full resolution via the inverse map."""
    inverse = np.asarray(inverse)
    if inverse.size == 0:
        raise CorrsegError("empty inverse map")
    if inverse.min() < 0 or inverse.max() >= len(field):
        raise CorrsegError("inverse index out of range for the sampled field")
    return ProbabilityField(probs=field.probs[inverse], source=field.source)
