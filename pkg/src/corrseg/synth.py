"""Deterministic synthetic transmission-corridor scenes.

Every scene is assembled from analytic parts: an undulating ground sheet,
Gaussian vegetation blobs clipped at the ground, lattice towers (three type
tags), conductors and shield wires sampled along catenaries, and the small
attachment hardware (insulator strings, V-strings, spacers, jumper arcs) that
gives the label distribution its long tail. The generator reports exact
per-class emission counts and per-component metadata (member indices,
endpoints, orientation), so downstream clustering and evaluation tests can
treat its bookkeeping as ground truth.

All randomness flows from one seeded Generator; a spec and seed reproduce a
scene bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from corrseg.model import CorrsegError, LabeledCloud, Taxonomy, default_taxonomy
from corrseg.sceneio import SceneEntry, SceneManifest, write_scene

__all__ = [
    "TOWER_TYPES",
    "PROFILES",
    "CorridorSpec",
    "Component",
    "GenerationResult",
    "a_from_sag",
    "catenary_z",
    "generate",
    "make_benchmark",
]

TOWER_TYPES = ("suspension", "tension", "terminal")

# Class IDs used by the generator (fixed taxonomy positions).
_JUMPER = 0
_GROUND = 2
_LOW_VEG = 8
_HIGH_VEG = 9
_CONDUCTOR = 10
_TOWER = 11
_STRAIN = 12
_V_STRING = 13
_SPACER = 14
_LINE_INSULATOR = 18
_GROUND_WIRE = 19
_OPTICAL = 20

_INSULATOR_LENGTH = 1.1
_ARM_REACH = 4.2


@dataclass(frozen=True)
class CorridorSpec:
    """Knobs controlling one generated corridor scene."""

    span: float = 110.0              # corridor length in meters
    corridor_width: float = 26.0
    n_towers: int = 2
    tower_type: str = "suspension"
    n_conductors: int = 3
    catenary_a: float = 400.0        # catenary parameter in meters
    ground_density: float = 3.8      # ground points per square meter
    veg_blobs: int = 26
    veg_points: int = 110            # points per vegetation blob
    wire_step: float = 0.9           # sample spacing along wires in meters
    seg_points: int = 12             # points per tower lattice segment
    insulator_points: int = 16
    spacer_points: int = 12
    jumper_points: int = 12
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.span <= 0:
            raise ValueError("span must be positive")
        if self.catenary_a <= 0:
            raise ValueError("catenary parameter must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be nonnegative")
        if self.tower_type not in TOWER_TYPES:
            raise ValueError(f"tower_type must be one of {TOWER_TYPES}")
        if self.n_towers < 0 or self.n_conductors < 1:
            raise ValueError("tower and conductor counts out of range")
        if self.corridor_width <= 0 or self.wire_step <= 0:
            raise ValueError("corridor_width and wire_step must be positive")
        for knob in ("ground_density", "veg_blobs", "veg_points", "seg_points",
                     "insulator_points", "spacer_points", "jumper_points"):
            if getattr(self, knob) < 0:
                raise ValueError(f"{knob} must be nonnegative")


@dataclass(frozen=True)
class Component:
    """One structured emission block and its ground-truth geometry."""

    kind: str
    class_id: int
    indices: np.ndarray          # into the scene arrays, contiguous
    x_start: np.ndarray | None = None
    x_end: np.ndarray | None = None
    orientation: float | None = None
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GenerationResult:
    cloud: LabeledCloud
    counts: dict                 # class ID -> emitted point count
    components: tuple


def catenary_z(x, a: float, x_m: float, z0: float):
    """z = z0 + a * (cosh((x - x_m) / a) - 1)."""
    return z0 + a * (np.cosh((np.asarray(x, dtype=np.float64) - x_m) / a) - 1.0)


def a_from_sag(span: float, sag: float) -> float:
    """Catenary parameter giving the requested midspan sag over one span.

    Solves sag = a * (cosh(span / (2a)) - 1) by bisection; sag is monotone
    decreasing in a, so the bracket [span/1000, 1e6] is safe for any
    practical geometry.
    """
    if span <= 0 or sag <= 0:
        raise ValueError("span and sag must be positive")
    lo, hi = span / 1000.0, 1e6
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * (np.cosh(span / (2.0 * mid)) - 1.0) > sag:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _ground_height(x, y):
    """Gentle terrain undulation so the ground sheet is not a perfect plane."""
    return 0.12 * np.sin(0.11 * x) * np.sin(0.07 * y)


class _Builder:
    """Accumulates labeled point blocks and component records in order."""

    def __init__(self):
        self.blocks = []
        self.labels = []
        self.components = []
        self.n = 0

    def add(self, points, class_id, kind=None, **meta):
        points = np.asarray(points, dtype=np.float64)
        if points.size == 0:
            return
        self.blocks.append(points)
        self.labels.append(np.full(points.shape[0], class_id, dtype=np.uint16))
        if kind is not None:
            idx = np.arange(self.n, self.n + points.shape[0])
            self.components.append(Component(kind=kind, class_id=class_id, indices=idx, **meta))
        self.n += points.shape[0]


def _segment(p0, p1, n, rng, sigma):
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    t = np.linspace(0.0, 1.0, max(2, n))[:, None]
    pts = p0 + t * (p1 - p0)
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, pts.shape)
    return pts


def _tower_segments(x_t: float, tower_type: str):
    """Lattice line segments (p0, p1) for one tower at x = x_t.

    Three silhouettes: the suspension tower is the slender default, the
    tension tower is wider with two cross-arms, the terminal tower is short
    and blocky.
    """
    if tower_type == "suspension":
        w0, w1, h_waist, h_top, arms = 2.4, 0.8, 14.0, 24.0, (18.0,)
    elif tower_type == "tension":
        w0, w1, h_waist, h_top, arms = 3.0, 1.0, 13.0, 24.0, (17.0, 21.0)
    else:  # terminal
        w0, w1, h_waist, h_top, arms = 3.2, 1.1, 10.0, 22.0, (15.0,)

    segs = []
    corners = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    for sx, sy in corners:
        base = (x_t + sx * w0, sy * w0, 0.0)
        waist = (x_t + sx * w1, sy * w1, h_waist)
        top = (x_t + sx * w1, sy * w1, h_top)
        segs.append((base, waist))
        segs.append((waist, top))
    # Horizontal bracing rings partway up the legs and at the waist.
    for h, w in ((h_waist * 0.5, (w0 + w1) / 2.0), (h_waist, w1)):
        ring = [(x_t + sx * w, sy * w, h) for sx, sy in [(1, 1), (1, -1), (-1, -1), (-1, 1)]]
        for i in range(4):
            segs.append((ring[i], ring[(i + 1) % 4]))
    for h_arm in arms:
        segs.append(((x_t, -_ARM_REACH, h_arm), (x_t, _ARM_REACH, h_arm)))
    # Shield-wire peak.
    segs.append(((x_t - w1, 0.0, h_top), (x_t, 0.0, h_top + 1.6)))
    segs.append(((x_t + w1, 0.0, h_top), (x_t, 0.0, h_top + 1.6)))
    return segs, arms[0], h_top


def _phase_offsets(n_conductors: int):
    if n_conductors == 1:
        return np.zeros(1)
    return np.linspace(-3.5, 3.5, n_conductors)


def _wire_points(x0, x1, y, z_attach, a, step, rng, sigma):
    n = max(2, int(round((x1 - x0) / step)) + 1)
    x = np.linspace(x0, x1, n)
    x_m = 0.5 * (x0 + x1)
    z0 = z_attach - a * (np.cosh((x0 - x_m) / a) - 1.0)
    z = catenary_z(x, a, x_m, z0)
    pts = np.stack([x, np.full(n, float(y)), z], axis=1)
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, pts.shape)
    return pts, {"a": a, "x_m": x_m, "z0": z0, "y": float(y)}


def generate(spec: CorridorSpec) -> GenerationResult:
    """Build one corridor scene; deterministic for a given spec."""
    rng = np.random.default_rng(spec.seed)
    b = _Builder()
    sigma = spec.noise_sigma
    half_w = spec.corridor_width / 2.0

    # Ground sheet. The count is fixed by area * density so class shares are
    # exact functions of the generation parameters, not sampling accidents.
    n_ground = int(round(spec.span * spec.corridor_width * spec.ground_density))
    if n_ground > 0:
        gx = rng.uniform(0.0, spec.span, n_ground)
        gy = rng.uniform(-half_w, half_w, n_ground)
        gz = _ground_height(gx, gy)
        if sigma > 0:
            gz = gz + rng.normal(0.0, sigma, n_ground)
        b.add(np.stack([gx, gy, gz], axis=1), _GROUND)

    # Vegetation: anisotropic Gaussian blobs, clipped at the terrain.
    for _ in range(spec.veg_blobs):
        cx = rng.uniform(0.0, spec.span)
        cy = rng.uniform(-half_w + 2.0, half_w - 2.0)
        tall = rng.random() > 0.45
        cz = rng.uniform(2.5, 5.0) if tall else 0.8
        scale = np.array([1.2, 1.2, 0.9]) * rng.uniform(0.7, 1.3)
        pts = np.array([cx, cy, cz]) + rng.normal(size=(spec.veg_points, 3)) * scale
        floor = _ground_height(pts[:, 0], pts[:, 1])
        pts[:, 2] = np.maximum(pts[:, 2], floor + 0.02)
        b.add(pts, _HIGH_VEG if tall else _LOW_VEG)

    # Towers.
    tower_x = np.linspace(0.0, spec.span, spec.n_towers) if spec.n_towers else np.empty(0)
    arm_z = top_z = None
    for x_t in tower_x:
        segs, arm_z, top_z = _tower_segments(float(x_t), spec.tower_type)
        pts = np.concatenate([_segment(p0, p1, spec.seg_points, rng, sigma) for p0, p1 in segs])
        b.add(pts, _TOWER, kind="tower", params={"x": float(x_t), "type": spec.tower_type})

    # Wires between adjacent towers: conductors at the cross-arm, shield wire
    # and optical cable near the peak.
    phases = _phase_offsets(spec.n_conductors)
    z_cond = None if arm_z is None else arm_z - _INSULATOR_LENGTH
    spacer_sites = []
    for i in range(max(0, spec.n_towers - 1)):
        x0, x1 = float(tower_x[i]), float(tower_x[i + 1])
        for y in phases:
            pts, meta = _wire_points(x0, x1, y, z_cond, spec.catenary_a, spec.wire_step, rng, sigma)
            b.add(pts, _CONDUCTOR, kind="conductor", params=meta)
        spacer_sites.append((0.5 * (x0 + x1), float(phases[0]), x0))
        for y, cid, kind, drop in (
            (0.9, _GROUND_WIRE, "ground_wire", 0.0),
            (-0.9, _OPTICAL, "optical_cable", 0.8),
        ):
            pts, meta = _wire_points(
                x0, x1, y, top_z + 1.6 - drop, spec.catenary_a, spec.wire_step, rng, sigma
            )
            b.add(pts, cid, kind=kind, params=meta)

    # Attachment hardware at each tower; the mix depends on the tower type.
    for t, x_t in enumerate(map(float, tower_x)):
        if spec.insulator_points == 0:
            break
        if spec.tower_type == "suspension":
            for y in phases:
                top = np.array([x_t, float(y), arm_z])
                bot = top - [0.0, 0.0, _INSULATOR_LENGTH]
                pts = _segment(top, bot, spec.insulator_points, rng, sigma)
                b.add(pts, _LINE_INSULATOR, kind="line_insulator",
                      x_start=top, x_end=bot, orientation=1.0)
        elif spec.tower_type == "tension":
            side = 1.0 if t < spec.n_towers - 1 else -1.0
            for y in phases[: min(2, len(phases))]:
                start = np.array([x_t + side * 0.4, float(y), arm_z - 0.05])
                end = start + [side * 1.08, 0.0, -0.15]
                length = np.linalg.norm(end - start)
                pts = _segment(start, end, spec.insulator_points, rng, sigma)
                b.add(pts, _STRAIN, kind="strain_insulator",
                      x_start=start, x_end=end, orientation=float(0.15 / length))
            for y in phases[: min(2, len(phases))]:
                if spec.jumper_points == 0:
                    break
                xs = np.linspace(-1.2, 1.2, spec.jumper_points)
                zs = arm_z - 0.4 - 0.7 * (1.0 - (xs / 1.2) ** 2)
                pts = np.stack([x_t + xs, np.full_like(xs, float(y)), zs], axis=1)
                if sigma > 0:
                    pts = pts + rng.normal(0.0, sigma, pts.shape)
                b.add(pts, _JUMPER, kind="jumper",
                      x_start=pts[0], x_end=pts[-1],
                      orientation=0.0, params={"y": float(y)})
        else:  # terminal
            for y in phases[: min(2, len(phases))]:
                top = np.array([x_t, float(y), arm_z])
                bot = top - [0.0, 0.0, _INSULATOR_LENGTH]
                pts = _segment(top, bot, spec.insulator_points, rng, sigma)
                b.add(pts, _LINE_INSULATOR, kind="line_insulator",
                      x_start=top, x_end=bot, orientation=1.0)
            y_v = float(phases[-1])
            apex = np.array([x_t, y_v, arm_z - 0.9])
            arms_pts = []
            for dy in (-0.8, 0.8):
                attach = np.array([x_t, y_v + dy, arm_z])
                arms_pts.append(_segment(attach, apex, max(2, spec.insulator_points // 2),
                                         rng, sigma))
            b.add(np.concatenate(arms_pts), _V_STRING, kind="v_string",
                  x_start=np.array([x_t, y_v - 0.8, arm_z]),
                  x_end=np.array([x_t, y_v + 0.8, arm_z]),
                  orientation=0.0)

    # Spacer hardware at midspan on the first phase, sitting on the wire.
    if spec.spacer_points > 0 and z_cond is not None:
        for xm, y, x0 in spacer_sites:
            sag = spec.catenary_a * (np.cosh((x0 - xm) / spec.catenary_a) - 1.0)
            center = np.array([xm, y, z_cond - sag])
            pts = center + rng.uniform(-0.2, 0.2, size=(spec.spacer_points, 3))
            b.add(pts, _SPACER, kind="spacer",
                  x_start=center, x_end=center, orientation=0.0)

    if b.n == 0:
        raise CorrsegError("spec produced an empty scene")

    coords = np.concatenate(b.blocks)
    labels = np.concatenate(b.labels)
    counts = {}
    for block_labels in b.labels:
        cid = int(block_labels[0])
        counts[cid] = counts.get(cid, 0) + block_labels.shape[0]
    cloud = LabeledCloud(coords=coords, labels=labels, scene_id=f"synthetic-{spec.seed}")
    return GenerationResult(cloud=cloud, counts=counts, components=tuple(b.components))


# Long-tail profiles: multiplicative adjustments on spec knobs.
PROFILES = {
    "default": {},
    "veg-heavy": {"veg_blobs": 1.6},
    "attachment-heavy": {"insulator_points": 2.0, "spacer_points": 2.0},
}


def make_benchmark(out_dir, n_scenes: int, profile: str = "default", seed: int = 0,
                   taxonomy: Taxonomy | None = None, jobs: int = 1):
    """Write a benchmark of scenes plus a manifest; returns exact bookkeeping.

    Scenes cycle through the three tower types and vary span and vegetation
    deterministically from the seed. Splits follow the floor rule: 70% train,
    15% val, remainder test, assigned in scene order. Generation is
    independent per scene, so jobs > 1 fans it out over processes; files are
    identical either way.

    Returns (manifest, aggregate class counts dict).
    """
    if n_scenes < 3:
        raise CorrsegError("benchmark needs at least 3 scenes")
    if profile not in PROFILES:
        raise CorrsegError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    tax = taxonomy or default_taxonomy()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    knobs = PROFILES[profile]
    rng = np.random.default_rng(seed)
    spans = rng.uniform(95.0, 125.0, n_scenes)
    veg = rng.integers(22, 31, n_scenes)
    child_seeds = rng.integers(0, 2**31 - 1, n_scenes)

    specs = []
    for i in range(n_scenes):
        spec = CorridorSpec(
            span=float(spans[i]),
            tower_type=TOWER_TYPES[i % 3],
            veg_blobs=int(veg[i]),
            seed=int(child_seeds[i]),
        )
        for name, factor in knobs.items():
            spec = replace(spec, **{name: type(getattr(spec, name))(getattr(spec, name) * factor)})
        specs.append(spec)

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(generate, specs))
    else:
        results = [generate(spec) for spec in specs]

    n_train = int(np.floor(0.7 * n_scenes))
    n_val = int(np.floor(0.15 * n_scenes))
    entries = []
    totals = {}
    for i, result in enumerate(results):
        for cid, cnt in result.counts.items():
            totals[cid] = totals.get(cid, 0) + cnt
        scene_id = f"scene_{i:04d}"
        rel = f"{scene_id}.cors"
        cloud = LabeledCloud(
            coords=result.cloud.coords, labels=result.cloud.labels, scene_id=scene_id
        )
        write_scene(cloud, out / rel, taxonomy=tax)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        entries.append(SceneEntry(scene_id=scene_id, path=rel, split=split,
                                  point_count=len(cloud)))
    manifest = SceneManifest(entries=tuple(entries))
    manifest.save(out / "manifest.tsv")
    return manifest, totals
