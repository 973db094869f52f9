"""Segmentation metrics and dataset statistics.

Metrics: per-class IoU and mIoU over a confusion matrix that excludes the
ignore label on both axes. Classes absent from prediction and ground truth
(zero union) are left out of the mean; present classes with zero
intersection count as 0.

Statistics: long-tail group shares, per-scene point counts, XY
oriented-bounding-box corridor length, and projected density (points per
square meter of OBB footprint). Percentiles use the nearest-rank rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from corrseg.model import CorrsegError, Taxonomy

__all__ = [
    "ConfusionMatrix",
    "SceneStats",
    "DEFAULT_GROUPS",
    "confusion_matrix",
    "iou_per_class",
    "mean_iou",
    "class_shares",
    "scene_stats",
    "split_summary",
    "percentile_nearest_rank",
    "obb_xy",
    "metrics_tsv",
]

# Semantic groups over the default 22-class taxonomy.
DEFAULT_GROUPS = {
    "ground_vegetation": frozenset({2, 8, 9}),
    "transmission_backbone": frozenset({10, 11, 19}),
    "critical_attachments": frozenset({0, 12, 13, 14, 18}),
    "optical_cable": frozenset({20}),
    "distribution_assets": frozenset({15, 16}),
    "other_context": frozenset({1, 3, 4, 5, 6, 7, 17, 21}),
}


def _labels_of(x) -> np.ndarray:
    return np.asarray(x.labels if hasattr(x, "labels") else x, dtype=np.int64)


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts, rows = ground truth, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("counts must be square")
        if counts.min() < 0:
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))

    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(counts=self.counts + other.counts)


def confusion_matrix(pred, gt, tax: Taxonomy) -> ConfusionMatrix:
    """Counts over points where neither side carries the ignore label."""
    p = _labels_of(pred)
    g = _labels_of(gt)
    if p.shape != g.shape:
        raise CorrsegError("prediction and ground truth lengths differ")
    c = tax.num_classes
    valid = (g != tax.ignore_label) & (p != tax.ignore_label)
    p, g = p[valid], g[valid]
    if (p >= c).any() or (g >= c).any() or (p < 0).any() or (g < 0).any():
        raise CorrsegError("labels outside the taxonomy")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (g, p), 1)
    return ConfusionMatrix(counts=counts)


def iou_per_class(pred, gt, tax: Taxonomy) -> tuple:
    """(per-class IoU vector, mIoU). Absent classes are NaN in the vector."""
    cm = pred if isinstance(pred, ConfusionMatrix) else confusion_matrix(pred, gt, tax)
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    iou = np.full(cm.num_classes, np.nan)
    nonzero = union > 0
    iou[nonzero] = tp[nonzero] / union[nonzero]
    if not nonzero.any():
        raise CorrsegError("no evaluated points")
    return iou, float(np.mean(iou[nonzero]))


def mean_iou(pred, gt, tax: Taxonomy) -> float:
    return iou_per_class(pred, gt, tax)[1]


def class_shares(scenes, groups: dict = None, num_classes: int = 22) -> dict:
    """Per-group point counts and shares over a scene collection.

    scenes: iterable of LabeledCloud (or raw label vectors). Returns
    {group: (count, share)} with exact integer counts; shares are fractions
    of all labeled points.
    """
    if groups is None:
        groups = DEFAULT_GROUPS
    per_class = np.zeros(num_classes, dtype=np.int64)
    for scene in scenes:
        labels = _labels_of(scene)
        if labels is None or labels.size == 0:
            continue
        counts = np.bincount(labels, minlength=num_classes)
        if counts.shape[0] > num_classes:
            raise CorrsegError("labels outside the taxonomy")
        per_class += counts
    total = int(per_class.sum())
    if total == 0:
        raise CorrsegError("no labeled points in any scene")
    out = {}
    for name, ids in groups.items():
        count = int(per_class[sorted(ids)].sum())
        out[name] = (count, count / total)
    return out


def percentile_nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    if n == 0:
        raise CorrsegError("percentile of an empty collection")
    if not 0 < q <= 100:
        raise ValueError("q must lie in (0, 100]")
    rank = int(np.ceil(q / 100.0 * n))
    return float(values[rank - 1])


def obb_xy(coords: np.ndarray) -> tuple:
    """Minimum-area oriented bounding box of the XY projection.

    Rotating calipers over convex-hull edges. Returns (length, width, area)
    with length >= width; collinear inputs give (extent, 0.0, 0.0).
    """
    xy = np.asarray(coords, dtype=np.float64)[:, :2]
    if xy.shape[0] < 3:
        raise CorrsegError("OBB needs at least 3 points")
    try:
        hull = ConvexHull(xy)
    except QhullError:
        # Collinear: extent along the principal direction, zero width.
        centered = xy - xy.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        t = centered @ vt[0]
        return float(t.max() - t.min()), 0.0, 0.0
    pts = xy[hull.vertices]
    edges = np.roll(pts, -1, axis=0) - pts
    norms = np.linalg.norm(edges, axis=1)
    dirs = edges[norms > 0] / norms[norms > 0][:, None]
    best = None
    for u in dirs:
        v = np.array([-u[1], u[0]])
        pu = pts @ u
        pv = pts @ v
        du = pu.max() - pu.min()
        dv = pv.max() - pv.min()
        area = du * dv
        if best is None or area < best[2]:
            best = (max(du, dv), min(du, dv), area)
    return best


@dataclass(frozen=True)
class SceneStats:
    point_count: int
    obb_length: float           # meters, major axis of the XY OBB
    obb_width: float
    footprint: float            # m^2
    density: float              # points / m^2; NaN when undefined
    density_defined: bool
    per_class_counts: np.ndarray
    present_classes: np.ndarray


def scene_stats(cloud, num_classes: int = 22) -> SceneStats:
    length, width, area = obb_xy(cloud.coords)
    defined = area > 0
    density = len(cloud) / area if defined else float("nan")
    if cloud.labels is not None:
        per_class = np.bincount(cloud.labels.astype(np.int64), minlength=num_classes)
    else:
        per_class = np.zeros(num_classes, dtype=np.int64)
    return SceneStats(
        point_count=len(cloud),
        obb_length=float(length),
        obb_width=float(width),
        footprint=float(area),
        density=float(density),
        density_defined=bool(defined),
        per_class_counts=per_class,
        present_classes=np.flatnonzero(per_class),
    )


def split_summary(stats_by_split: dict) -> dict:
    """Median and P90 of point count, corridor length, and density per split.

    stats_by_split: {split: [SceneStats, ...]}. Splits with no scenes are
    reported with count 0 and no percentiles.
    """
    table = {}
    for split, stats in stats_by_split.items():
        if not stats:
            table[split] = {"scenes": 0}
            continue
        counts = [s.point_count for s in stats]
        lengths = [s.obb_length for s in stats]
        dens = [s.density for s in stats if s.density_defined]
        row = {
            "scenes": len(stats),
            "median_points": percentile_nearest_rank(counts, 50),
            "p90_points": percentile_nearest_rank(counts, 90),
            "median_length_m": percentile_nearest_rank(lengths, 50),
            "p90_length_m": percentile_nearest_rank(lengths, 90),
        }
        if dens:
            row["median_density"] = percentile_nearest_rank(dens, 50)
        table[split] = row
    return table


def metrics_tsv(iou: np.ndarray, miou: float, tax: Taxonomy) -> str:
    """Deterministic tab-separated metrics block (no timestamps)."""
    lines = ["class\tname\tiou"]
    for c in range(tax.num_classes):
        val = "absent" if np.isnan(iou[c]) else f"{iou[c]:.6f}"
        lines.append(f"{c}\t{tax.names[c]}\t{val}")
    lines.append(f"mIoU\t\t{miou:.6f}")
    return "\n".join(lines) + "\n"
