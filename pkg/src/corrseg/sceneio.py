"""Scene and manifest I/O.

Native ``.crs`` scene files are a fixed little-endian binary layout:

    bytes 0..7    magic "CORRSEG1"
    bytes 8..15   point count, uint64
    bytes 16..23  flags bitfield, uint64 (bit 0 has_colors, bit 1 has_labels)
    bytes 24..31  taxonomy config checksum, uint64 (0 if unknown)
    then          coords  N x 3 float64
    then          colors  N x 3 uint8   (if has_colors)
    then          labels  N uint16      (if has_labels)

PLY interchange covers ASCII and binary-little-endian files with float x/y/z,
optional uchar red/green/blue, and an optional integer label or segment
property. Manifests are line-oriented UTF-8:
``scene_id<TAB>path<TAB>split<TAB>point_count``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from corrseg.model import CorrsegError, LabeledCloud, Taxonomy

__all__ = [
    "SceneFormatError",
    "PlyFormatError",
    "ManifestError",
    "SceneEntry",
    "SceneManifest",
    "write_scene",
    "read_scene",
    "export_ply",
    "import_ply",
]

MAGIC = b"CORRSEG1"
FLAG_HAS_COLORS = 0x1
FLAG_HAS_LABELS = 0x2
HEADER_SIZE = 32
SPLITS = ("train", "val", "test")


class SceneFormatError(CorrsegError):
    """Malformed .crs file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PlyFormatError(CorrsegError):
    pass


class ManifestError(CorrsegError):
    pass


def write_scene(cloud: LabeledCloud, path, taxonomy: Taxonomy | None = None) -> None:
    """Write a cloud to the native format; read_scene restores it bit-exactly."""
    flags = 0
    if cloud.colors is not None:
        flags |= FLAG_HAS_COLORS
    if cloud.labels is not None:
        flags |= FLAG_HAS_LABELS
    tax_hash = taxonomy.config_hash() if taxonomy is not None else 0
    header = MAGIC + struct.pack("<QQQ", len(cloud), flags, tax_hash)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(cloud.coords, dtype="<f8").tobytes())
        if cloud.colors is not None:
            f.write(np.ascontiguousarray(cloud.colors, dtype=np.uint8).tobytes())
        if cloud.labels is not None:
            f.write(np.ascontiguousarray(cloud.labels, dtype="<u2").tobytes())


def read_scene(path, scene_id: str | None = None) -> LabeledCloud:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise SceneFormatError("truncated header", len(data))
    if data[:8] != MAGIC:
        raise SceneFormatError(f"bad magic {data[:8]!r}", 0)
    n, flags, _tax_hash = struct.unpack("<QQQ", data[8:HEADER_SIZE])
    if n == 0:
        raise SceneFormatError("zero point count", 8)
    known = FLAG_HAS_COLORS | FLAG_HAS_LABELS
    if flags & ~known:
        raise SceneFormatError(f"unknown flag bits 0x{flags & ~known:x}", 16)
    expected = HEADER_SIZE + n * 24
    if flags & FLAG_HAS_COLORS:
        expected += n * 3
    if flags & FLAG_HAS_LABELS:
        expected += n * 2
    if len(data) != expected:
        raise SceneFormatError(
            f"flag/array mismatch: expected {expected} bytes, found {len(data)}",
            min(len(data), expected),
        )
    offset = HEADER_SIZE
    coords = np.frombuffer(data, dtype="<f8", count=n * 3, offset=offset).reshape(n, 3)
    offset += n * 24
    colors = None
    if flags & FLAG_HAS_COLORS:
        colors = np.frombuffer(data, dtype=np.uint8, count=n * 3, offset=offset).reshape(n, 3)
        offset += n * 3
    labels = None
    if flags & FLAG_HAS_LABELS:
        labels = np.frombuffer(data, dtype="<u2", count=n, offset=offset)
    if scene_id is None:
        scene_id = Path(path).stem
    return LabeledCloud(coords=coords, colors=colors, labels=labels, scene_id=scene_id)


# ---------------------------------------------------------------------------
# PLY interchange

_PLY_INT_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
}
_PLY_FLOAT_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}
_PLY_TYPES = {**_PLY_INT_TYPES, **_PLY_FLOAT_TYPES}


def export_ply(cloud: LabeledCloud, path, binary: bool = True) -> None:
    """Write x/y/z (float32), optional colors, and labels as a 'label' property."""
    n = len(cloud)
    props = [("x", "float"), ("y", "float"), ("z", "float")]
    if cloud.colors is not None:
        props += [("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
    if cloud.labels is not None:
        props += [("label", "ushort")]
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t in props]
    header += ["end_header"]
    dtype = np.dtype([(name, "<" + _PLY_TYPES[t]) for name, t in props])
    rec = np.empty(n, dtype=dtype)
    coords32 = cloud.coords.astype("<f4")
    rec["x"], rec["y"], rec["z"] = coords32[:, 0], coords32[:, 1], coords32[:, 2]
    if cloud.colors is not None:
        rec["red"], rec["green"], rec["blue"] = (cloud.colors[:, i] for i in range(3))
    if cloud.labels is not None:
        rec["label"] = cloud.labels
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(rec.tobytes())
        else:
            cols = []
            for name, t in props:
                if t in _PLY_FLOAT_TYPES:
                    cols.append([repr(float(v)) for v in rec[name]])
                else:
                    cols.append([str(int(v)) for v in rec[name]])
            lines = (" ".join(row) for row in zip(*cols))
            f.write(("\n".join(lines) + "\n").encode("ascii"))


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if end < 0:
        raise PlyFormatError("missing end_header")
    end = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, type_code)])
    for line in lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyFormatError("property before any element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[-1], ("list", tokens[2], tokens[3])))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise PlyFormatError(f"unsupported property type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, end


def import_ply(path, scene_id: str | None = None) -> LabeledCloud:
    data = Path(path).read_bytes()
    fmt, elements, body_start = _parse_ply_header(data)
    if not elements or elements[0][0] != "vertex":
        # Vertex data must come first; later elements would need skipping logic
        # we cannot do safely for list properties.
        raise PlyFormatError("unsupported element order: vertex element must come first")
    name, count, props = elements[0]
    for _, code in props:
        if isinstance(code, tuple):
            raise PlyFormatError("list properties on vertex element are unsupported")
    prop_names = [p for p, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise PlyFormatError("not a point cloud: missing x/y/z properties")
    dtype = np.dtype([(p, "<" + c) for p, c in props])
    if fmt == "binary_little_endian":
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    else:
        text = data[body_start:].decode("ascii")
        rows = text.split()
        width = len(props)
        if len(rows) < count * width:
            raise PlyFormatError("truncated ASCII vertex data")
        table = np.array(rows[: count * width]).reshape(count, width)
        rec = np.empty(count, dtype=dtype)
        for j, (p, c) in enumerate(props):
            rec[p] = table[:, j].astype("float64" if c in ("f4", "f8") else "int64")
    coords = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = None
    if all(c in prop_names for c in ("red", "green", "blue")):
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    labels = None
    for label_name in ("label", "segment"):
        if label_name in prop_names:
            labels = np.asarray(rec[label_name])
            break
    if scene_id is None:
        scene_id = Path(path).stem
    return LabeledCloud(coords=coords, colors=colors, labels=labels, scene_id=scene_id)


# ---------------------------------------------------------------------------
# Split manifests

@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    path: str          # relative to the manifest location
    split: str
    point_count: int
    bbox_extent: tuple | None = None  # (dx, dy, dz) meters, not serialized

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class SceneManifest:
    entries: tuple

    def __post_init__(self):
        ids = [e.scene_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("scene_ids must be unique")

    def __len__(self):
        return len(self.entries)

    def split(self, split: str) -> tuple:
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return tuple(e for e in self.entries if e.split == split)

    def split_counts(self) -> dict:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        return counts

    def save(self, path) -> None:
        lines = [
            f"{e.scene_id}\t{e.path}\t{e.split}\t{e.point_count}" for e in self.entries
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SceneManifest":
        entries = []
        for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"manifest line {ln}: expected 4 tab-separated fields")
            scene_id, rel, split, count = parts
            entries.append(SceneEntry(scene_id, rel, split, int(count)))
        return cls(entries=tuple(entries))
