"""Geometric verification: per-class DBSCAN instance extraction, rule-based
cluster scoring, and probability-guided relabeling of clusters that fail
their class's geometric constraints.

DBSCAN semantics (pinned for oracle tests): a core point has at least
min_samples points within eps, itself included, with an inclusive boundary
(d <= eps). Clusters are the connected components of the core points under
the eps-graph, numbered by index-ordered expansion; a border point (non-core
within eps of at least one core) joins the lowest cluster ID among its
adjacent cores; everything else is noise (-1), and noise keeps its label
during verification.

A cluster's score is the weight-normalized fraction of satisfied constraints
from its class's registry entry. Clusters scoring below tau_geo have every
member relabeled to the runner-up class of its fused probability row (the
argmax excluding the current class).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from corrseg.model import CorrsegError, Prediction, ProbabilityField

__all__ = [
    "CONSTRAINT_KINDS",
    "DEFAULT_EPS",
    "DEFAULT_MIN_SAMPLES",
    "DEFAULT_TAU_GEO",
    "DEFAULT_VERIFIED_CLASSES",
    "DbscanParams",
    "GeoConstraint",
    "ConstraintRegistry",
    "ClusterSet",
    "ClusterReport",
    "SceneContext",
    "dbscan",
    "orientation_ratio",
    "cluster_endpoints",
    "score_cluster",
    "verify_and_relabel",
    "default_registry",
    "reports_tsv",
]

DEFAULT_EPS = 0.5
DEFAULT_MIN_SAMPLES = 10
DEFAULT_TAU_GEO = 0.4
DEFAULT_VERIFIED_CLASSES = (0, 12, 13, 14, 18, 19, 20)
_TIE_SLOP = 1e-9

CONSTRAINT_KINDS = (
    "orientation-range",
    "point-count-range",
    "bbox-extent-range",
    "elongation-min",
    "height-above-ground-range",
    "proximity-to-class",
)


@dataclass(frozen=True)
class DbscanParams:
    """Per-class clustering parameters with shared defaults."""

    eps: float = DEFAULT_EPS
    min_samples: int = DEFAULT_MIN_SAMPLES
    per_class: dict = field(default_factory=dict)  # class-ID -> (eps, min_samples)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        for c, (eps, ms) in self.per_class.items():
            if eps <= 0 or ms < 1:
                raise ValueError(f"invalid DBSCAN override for class {c}")

    def for_class(self, class_id: int) -> tuple:
        return self.per_class.get(class_id, (self.eps, self.min_samples))


@dataclass(frozen=True)
class ClusterSet:
    """DBSCAN output: per-point cluster IDs (-1 noise) and the cluster count."""

    labels: np.ndarray
    n_clusters: int

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def noise(self) -> np.ndarray:
        return np.flatnonzero(self.labels == -1)


def dbscan(coords: np.ndarray, eps: float, min_samples: int) -> ClusterSet:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2:
        raise ValueError("coords must be an N x d matrix")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = coords.shape[0]
    if n == 0:
        return ClusterSet(labels=np.empty(0, dtype=np.int64), n_clusters=0)

    tree = cKDTree(coords)
    raw = tree.query_ball_point(coords, eps * (1.0 + _TIE_SLOP) + 1e-300)
    neighbors = []
    e2 = eps * eps
    for i in range(n):
        cand = np.asarray(raw[i], dtype=np.int64)
        d2 = np.square(coords[cand] - coords[i]).sum(axis=1)
        neighbors.append(cand[d2 <= e2])
    core = np.array([nb.shape[0] >= min_samples for nb in neighbors])

    labels = np.full(n, -1, dtype=np.int64)
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = cid
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in neighbors[j]:
                if core[k] and labels[k] == -1:
                    labels[k] = cid
                    queue.append(k)
        cid += 1

    # Border points: lowest adjacent-core cluster ID wins ties.
    for i in range(n):
        if core[i]:
            continue
        adjacent = [labels[j] for j in neighbors[i] if core[j]]
        if adjacent:
            labels[i] = min(adjacent)
    return ClusterSet(labels=labels, n_clusters=cid)


def orientation_ratio(start: np.ndarray, end: np.ndarray) -> float:
    """|dz| / ||d||_2 of the endpoint segment; coincident endpoints give 0."""
    delta = np.asarray(end, dtype=np.float64) - np.asarray(start, dtype=np.float64)
    norm = np.linalg.norm(delta)
    if norm == 0.0:
        return 0.0
    return float(abs(delta[2]) / norm)


def cluster_endpoints(points: np.ndarray) -> tuple:
    """(start, end, degenerate): extreme members along the first principal axis.

    Well-defined for curved runs (insulator strings, jumper arcs). A
    single-point or fully coincident cluster is degenerate: both endpoints
    equal that point.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 1:
        return points[0], points[0], True
    centered = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 1e-12:
        return points[0], points[0], True
    t = centered @ vt[0]
    return points[np.argmin(t)], points[np.argmax(t)], False


@dataclass(frozen=True)
class GeoConstraint:
    kind: str
    params: dict
    weight: float

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.weight <= 0:
            raise ValueError("constraint weight must be positive")


@dataclass(frozen=True)
class ClusterReport:
    class_id: int
    member_indices: np.ndarray   # indices into the scene arrays
    x_start: np.ndarray
    x_end: np.ndarray
    orientation: float
    degenerate_endpoints: bool
    score: float
    unconstrained: bool
    decision: str                # keep | relabel
    noise_indices: np.ndarray    # noise of this class's DBSCAN run


class SceneContext:
    """Scene-level lookups shared by all cluster scorers."""

    def __init__(self, coords: np.ndarray, labels: np.ndarray):
        self.coords = np.asarray(coords, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.coords.shape[0] != self.labels.shape[0]:
            raise CorrsegError("coords and labels lengths differ")
        self._xy_tree = None
        self._class_trees = {}

    def xy_tree(self) -> cKDTree:
        if self._xy_tree is None:
            self._xy_tree = cKDTree(self.coords[:, :2])
        return self._xy_tree

    def class_tree(self, class_id: int):
        """KD-tree over points whose (preliminary) label is class_id, or None."""
        if class_id not in self._class_trees:
            idx = np.flatnonzero(self.labels == class_id)
            self._class_trees[class_id] = cKDTree(self.coords[idx]) if idx.size else None
        return self._class_trees[class_id]


def _constraint_satisfied(con: GeoConstraint, points: np.ndarray,
                          orientation: float, ctx: SceneContext) -> bool:
    p = con.params
    if con.kind == "orientation-range":
        return p["lo"] <= orientation <= p["hi"]
    if con.kind == "point-count-range":
        return p["lo"] <= points.shape[0] <= p["hi"]
    if con.kind == "bbox-extent-range":
        extent = float((points.max(axis=0) - points.min(axis=0)).max())
        return p["lo"] <= extent <= p["hi"]
    if con.kind == "elongation-min":
        centered = points - points.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s.shape[0] < 2 or s[1] <= 1e-12:
            return True  # perfectly thin: infinitely elongated
        return s[0] / s[1] >= p["min"]
    if con.kind == "height-above-ground-range":
        radius = p.get("radius", 5.0)
        centroid = points.mean(axis=0)
        disk = ctx.xy_tree().query_ball_point(centroid[:2], radius)
        ground = ctx.coords[disk, 2].min() if disk else points[:, 2].min()
        height = centroid[2] - ground
        return p["lo"] <= height <= p["hi"]
    if con.kind == "proximity-to-class":
        tree = ctx.class_tree(int(p["class_id"]))
        if tree is None:
            return False  # target class absent: cannot be near it
        d, _ = tree.query(points, k=1)
        return float(np.min(d)) <= p["max_dist"]
    raise ValueError(f"unknown constraint kind {con.kind!r}")


def score_cluster(
    class_id: int,
    member_indices: np.ndarray,
    constraints,
    ctx: SceneContext,
    noise_indices: np.ndarray | None = None,
    tau_geo: float = DEFAULT_TAU_GEO,
) -> ClusterReport:
    """Weight-normalized indicator score over the class's applicable constraints.

    An empty applicable set scores 1.0 and is flagged unconstrained (such
    clusters are never relabeled).
    """
    member_indices = np.asarray(member_indices, dtype=np.int64)
    points = ctx.coords[member_indices]
    start, end, degenerate = cluster_endpoints(points)
    orientation = orientation_ratio(start, end)
    constraints = list(constraints)
    if constraints:
        weights = np.array([c.weight for c in constraints], dtype=np.float64)
        weights = weights / weights.sum()
        hits = np.array(
            [_constraint_satisfied(c, points, orientation, ctx) for c in constraints],
            dtype=np.float64,
        )
        score = float(weights @ hits)
        unconstrained = False
    else:
        score = 1.0
        unconstrained = True
    decision = "relabel" if score < tau_geo else "keep"
    return ClusterReport(
        class_id=class_id,
        member_indices=member_indices,
        x_start=start,
        x_end=end,
        orientation=orientation,
        degenerate_endpoints=degenerate,
        score=score,
        unconstrained=unconstrained,
        decision=decision,
        noise_indices=np.empty(0, dtype=np.int64) if noise_indices is None else noise_indices,
    )


@dataclass(frozen=True)
class ConstraintRegistry:
    """class-ID -> tuple of GeoConstraint, with text-config round trips."""

    by_class: dict

    def constraints_for(self, class_id: int):
        return self.by_class.get(class_id, ())

    def to_config_text(self) -> str:
        lines = []
        for class_id in sorted(self.by_class):
            for con in self.by_class[class_id]:
                parts = [f"class={class_id}", f"kind={con.kind}", f"weight={con.weight:g}"]
                for key in sorted(con.params):
                    parts.append(f"{key}={con.params[key]:g}")
                lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_config_text(cls, text: str) -> "ConstraintRegistry":
        by_class = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise CorrsegError(f"constraint config line {ln}: expected key=value tokens")
                key, value = token.split("=", 1)
                fields[key] = value
            try:
                class_id = int(fields.pop("class"))
                kind = fields.pop("kind")
                weight = float(fields.pop("weight"))
            except KeyError as missing:
                raise CorrsegError(f"constraint config line {ln}: missing {missing}")
            params = {
                key: (int(v) if key == "class_id" else float(v))
                for key, v in fields.items()
            }
            con = GeoConstraint(kind=kind, params=params, weight=weight)
            by_class.setdefault(class_id, []).append(con)
        return cls(by_class={c: tuple(v) for c, v in by_class.items()})


def default_registry() -> ConstraintRegistry:
    """Shipped constraint set for the attachment classes.

    Orientation windows follow the vertical-hang / horizontal-tension
    expectations for line and strain insulators; the point-count, extent, and
    tower-proximity side constraints carry low weight so a failed orientation
    alone (0.3 remaining) already falls below the 0.4 threshold.
    """
    side = lambda: [
        GeoConstraint(kind="point-count-range", params={"lo": 4, "hi": 2000}, weight=0.1),
        GeoConstraint(kind="bbox-extent-range", params={"lo": 0.2, "hi": 8.0}, weight=0.1),
        GeoConstraint(
            kind="proximity-to-class", params={"class_id": 11, "max_dist": 3.0}, weight=0.1
        ),
    ]
    by_class = {
        12: tuple(
            [GeoConstraint(kind="orientation-range", params={"lo": 0.0, "hi": 0.35}, weight=0.7)]
            + side()
        ),
        18: tuple(
            [GeoConstraint(kind="orientation-range", params={"lo": 0.85, "hi": 1.0}, weight=0.7)]
            + side()
        ),
        13: (
            GeoConstraint(kind="bbox-extent-range", params={"lo": 0.2, "hi": 8.0}, weight=0.5),
            GeoConstraint(
                kind="proximity-to-class", params={"class_id": 11, "max_dist": 3.0}, weight=0.5
            ),
        ),
    }
    return ConstraintRegistry(by_class=by_class)


def verify_and_relabel(
    pred: Prediction,
    fused: ProbabilityField,
    coords: np.ndarray,
    params: DbscanParams = None,
    registry: ConstraintRegistry = None,
    tau_geo: float = DEFAULT_TAU_GEO,
    verified_classes=DEFAULT_VERIFIED_CLASSES,
) -> tuple:
    """Cluster each verified class, score, and relabel failing clusters.

    Members of a failing cluster take the runner-up class of their own fused
    row (argmax over c' != current); noise and unverified classes keep their
    labels. Returns (Prediction with geo-verified provenance, [ClusterReport]).
    """
    if params is None:
        params = DbscanParams()
    if registry is None:
        registry = default_registry()
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(pred.labels, dtype=np.int64)
    if coords.shape[0] != labels.shape[0] or len(fused) != labels.shape[0]:
        raise CorrsegError("prediction, field, and coordinates must share N")

    ctx = SceneContext(coords, labels)
    new_labels = labels.copy()
    reports = []
    for class_id in sorted(verified_classes):
        class_idx = np.flatnonzero(labels == class_id)
        if class_idx.size == 0:
            continue
        eps, min_samples = params.for_class(class_id)
        clusters = dbscan(coords[class_idx], eps, min_samples)
        noise_global = class_idx[clusters.noise()]
        for k in range(clusters.n_clusters):
            members = class_idx[clusters.members(k)]
            report = score_cluster(
                class_id,
                members,
                registry.constraints_for(class_id),
                ctx,
                noise_indices=noise_global,
                tau_geo=tau_geo,
            )
            reports.append(report)
            if report.decision == "relabel":
                rows = fused.probs[members].copy()
                rows[:, class_id] = -np.inf
                new_labels[members] = rows.argmax(axis=1)
    return Prediction(labels=new_labels, provenance="geo-verified"), reports


def reports_tsv(reports) -> str:
    """Tab-separated cluster diagnostics."""
    lines = [
        "class\tmembers\tscore\tdecision\torientation\tx_start\tx_end\tunconstrained"
    ]
    for r in reports:
        fmt = lambda p: ",".join(f"{v:.3f}" for v in p)
        lines.append(
            f"{r.class_id}\t{r.member_indices.size}\t{r.score:.4f}\t{r.decision}\t"
            f"{r.orientation:.4f}\t{fmt(r.x_start)}\t{fmt(r.x_end)}\t{int(r.unconstrained)}"
        )
    return "\n".join(lines) + "\n"
