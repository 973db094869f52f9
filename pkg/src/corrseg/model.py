"""Core scene data model: labeled clouds, the class taxonomy, and prediction containers.

Everything here is an immutable value object; arrays are made read-only at
construction so instances can be shared freely across threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CorrsegError",
    "LabeledCloud",
    "Taxonomy",
    "ProbabilityField",
    "Prediction",
    "default_taxonomy",
    "argmax_labels",
    "to_primary_protocol",
]


class CorrsegError(Exception):
    """Base class for domain errors raised by this package."""


FIELD_SOURCES = ("local", "global", "fused")
PROVENANCES = ("argmax-local", "argmax-global", "fused-preliminary", "geo-verified")

# Class names fixed by the benchmark-facing rare set (IDs 0, 12, 13, 14, 18,
# 19, 20); the remaining entries are shipped defaults and may be edited via a
# taxonomy config file (see Taxonomy.from_config_text).
DEFAULT_CLASS_NAMES = (
    "jumper",                 # 0, fixed
    "street_sign",            # 1
    "ground",                 # 2
    "building",               # 3
    "road",                   # 4
    "greenhouse",             # 5
    "railway",                # 6
    "vehicle",                # 7
    "low_vegetation",         # 8
    "high_vegetation",        # 9
    "conductor",              # 10
    "tower",                  # 11
    "strain_insulator",       # 12, fixed
    "v_string_insulator",     # 13, fixed
    "spacer",                 # 14, fixed
    "distribution_tower",     # 15
    "distribution_conductor", # 16
    "water",                  # 17
    "line_insulator",         # 18, fixed
    "ground_wire",            # 19, fixed
    "optical_cable",          # 20, fixed
    "other",                  # 21
)

DEFAULT_RARE_SET = frozenset({0, 12, 13, 14, 18, 19, 20})

# Primary 10-class protocol: attachment + backbone classes keep their IDs,
# high vegetation merges into low vegetation, everything else is ignored.
# Primary IDs are fixed points of the map, so the projection is idempotent.
DEFAULT_PRIMARY_MAP = {
    0: 0,    # jumper
    8: 8,    # low vegetation
    9: 8,    # high vegetation -> low vegetation
    10: 10,  # conductor
    11: 11,  # tower
    12: 12,  # strain insulator
    13: 13,  # v-string insulator
    14: 14,  # spacer
    18: 18,  # line insulator
    19: 19,  # ground wire
    20: 20,  # optical cable
}


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Taxonomy:
    """Class taxonomy with rare-class set and the primary 10-class protocol map.

    ignore_label is one past the last valid ID so label arrays stay in a
    single unsigned integer range.
    """

    num_classes: int = 22
    names: tuple = DEFAULT_CLASS_NAMES
    rare_set: frozenset = DEFAULT_RARE_SET
    primary_map: dict = field(default_factory=lambda: dict(DEFAULT_PRIMARY_MAP))

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.names) != self.num_classes:
            raise ValueError("names length must equal num_classes")
        if not set(self.rare_set) <= set(range(self.num_classes)):
            raise ValueError("rare_set contains IDs outside the taxonomy")
        for k, v in self.primary_map.items():
            if not (0 <= k < self.num_classes):
                raise ValueError(f"primary_map key {k} outside the taxonomy")
            if v < 0:
                raise ValueError("primary IDs must be nonnegative")

    @property
    def ignore_label(self) -> int:
        return self.num_classes

    @property
    def num_primary(self) -> int:
        return len(set(self.primary_map.values()))

    def name_of(self, class_id: int) -> str:
        return self.names[class_id]

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    def class_weights(self, rare_weight: float) -> np.ndarray:
        w = np.ones(self.num_classes)
        for c in self.rare_set:
            w[c] = rare_weight
        return w

    def to_config_text(self) -> str:
        lines = [f"num_classes={self.num_classes}"]
        for i, name in enumerate(self.names):
            lines.append(f"class.{i}={name}")
        lines.append("rare=" + ",".join(str(c) for c in sorted(self.rare_set)))
        for k in sorted(self.primary_map):
            lines.append(f"primary.{k}={self.primary_map[k]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_config_text(cls, text: str) -> "Taxonomy":
        num_classes = None
        names = {}
        rare = frozenset()
        primary = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CorrsegError(f"taxonomy config line {ln}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "num_classes":
                num_classes = int(value)
            elif key == "rare":
                rare = frozenset(int(t) for t in value.split(",") if t)
            elif key.startswith("class."):
                names[int(key[6:])] = value
            elif key.startswith("primary."):
                primary[int(key[8:])] = int(value)
            else:
                raise CorrsegError(f"taxonomy config line {ln}: unknown key {key!r}")
        if num_classes is None:
            raise CorrsegError("taxonomy config missing num_classes")
        missing = [i for i in range(num_classes) if i not in names]
        if missing:
            raise CorrsegError(f"taxonomy config missing class names for IDs {missing}")
        return cls(
            num_classes=num_classes,
            names=tuple(names[i] for i in range(num_classes)),
            rare_set=rare,
            primary_map=primary,
        )

    def config_hash(self) -> int:
        """Stable 64-bit checksum of the canonical config serialization."""
        digest = hashlib.blake2b(self.to_config_text().encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


def default_taxonomy() -> Taxonomy:
    return Taxonomy()


@dataclass(frozen=True)
class LabeledCloud:
    """N points with coordinates in meters, optional colors and per-point labels."""

    coords: np.ndarray                 # N x 3 float64
    colors: np.ndarray | None = None   # N x 3 uint8
    labels: np.ndarray | None = None   # N uint16 class IDs
    scene_id: str = ""

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError("coords must be an N x 3 matrix")
        if coords.shape[0] < 1:
            raise ValueError("cloud must contain at least one point")
        if not np.isfinite(coords).all():
            raise ValueError("coords contain NaN or Inf")
        object.__setattr__(self, "coords", _freeze(coords))
        if self.colors is not None:
            colors = np.asarray(self.colors)
            if colors.shape != coords.shape:
                raise ValueError("colors must match coords shape")
            if colors.min() < 0 or colors.max() > 255:
                raise ValueError("colors must lie in [0, 255]")
            object.__setattr__(self, "colors", _freeze(colors.astype(np.uint8)))
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (coords.shape[0],):
                raise ValueError("labels must be an N-vector")
            if labels.min() < 0:
                raise ValueError("labels must be nonnegative class IDs")
            object.__setattr__(self, "labels", _freeze(labels.astype(np.uint16)))

    def __len__(self) -> int:
        return self.coords.shape[0]

    def check_labels(self, tax: Taxonomy) -> None:
        if self.labels is not None and self.labels.max(initial=0) > tax.ignore_label:
            raise CorrsegError("labels outside the active taxonomy")

    def select(self, indices: np.ndarray, scene_id: str | None = None) -> "LabeledCloud":
        """New cloud restricted to the given point indices."""
        return LabeledCloud(
            coords=self.coords[indices],
            colors=None if self.colors is None else self.colors[indices],
            labels=None if self.labels is None else self.labels[indices],
            scene_id=self.scene_id if scene_id is None else scene_id,
        )


@dataclass(frozen=True)
class ProbabilityField:
    """Per-point class-probability matrix; every row is a distribution."""

    probs: np.ndarray   # N x C float64
    source: str         # one of FIELD_SOURCES

    ROW_SUM_TOL = 1e-6

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError("probs must be an N x C matrix")
        if probs.shape[0] < 1:
            raise CorrsegError("empty probability field")
        if self.source not in FIELD_SOURCES:
            raise ValueError(f"source must be one of {FIELD_SOURCES}")
        if not np.isfinite(probs).all():
            raise CorrsegError("probabilities contain NaN or Inf")
        if probs.min() < 0:
            raise CorrsegError("probabilities must be nonnegative")
        row_sums = probs.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > self.ROW_SUM_TOL:
            raise CorrsegError("probability rows must sum to 1 within 1e-6")
        object.__setattr__(self, "probs", _freeze(probs))

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class Prediction:
    """Per-point class labels plus a provenance tag tracing how they were made."""

    labels: np.ndarray  # N int class IDs
    provenance: str     # one of PROVENANCES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] < 1:
            raise ValueError("labels must be a nonempty vector")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        object.__setattr__(self, "labels", _freeze(labels.astype(np.int64)))

    def __len__(self) -> int:
        return self.labels.shape[0]


_SOURCE_TO_PROVENANCE = {
    "local": "argmax-local",
    "global": "argmax-global",
    "fused": "fused-preliminary",
}


def argmax_labels(field: ProbabilityField) -> Prediction:
    """Row-wise argmax labels; ties break to the lowest class ID."""
    # np.argmax returns the first maximum, which is the lowest class ID.
    labels = np.argmax(field.probs, axis=1)
    return Prediction(labels=labels, provenance=_SOURCE_TO_PROVENANCE[field.source])


def to_primary_protocol(pred: Prediction, tax: Taxonomy) -> Prediction:
    """Map labels into the primary protocol; unmapped classes become ignore_label."""
    lut = np.full(tax.num_classes + 1, tax.ignore_label, dtype=np.int64)
    for k, v in tax.primary_map.items():
        lut[k] = v
    labels = np.asarray(pred.labels)
    if labels.max(initial=0) > tax.num_classes or labels.min(initial=0) < 0:
        raise ValueError("prediction labels outside the active taxonomy")
    return Prediction(labels=lut[labels], provenance=pred.provenance)
