"""Round-trip and malformed-input tests for scene files, PLY interchange,
and split manifests."""

import struct

import numpy as np
import pytest

from corrseg.model import LabeledCloud, default_taxonomy
from corrseg.sceneio import (
    FLAG_HAS_LABELS,
    HEADER_SIZE,
    MAGIC,
    ManifestError,
    PlyFormatError,
    SceneEntry,
    SceneFormatError,
    SceneManifest,
    export_ply,
    import_ply,
    read_scene,
    write_scene,
)


def make_cloud(rng, n=50, colors=True, labels=True, scene_id="scene"):
    return LabeledCloud(
        coords=rng.normal(0, 100, size=(n, 3)),
        colors=rng.integers(0, 256, size=(n, 3)).astype(np.uint8) if colors else None,
        labels=rng.integers(0, 22, size=n).astype(np.uint16) if labels else None,
        scene_id=scene_id,
    )


class TestNativeRoundTrip:
    @pytest.mark.parametrize("colors,labels", [(False, False), (True, False), (False, True), (True, True)])
    def test_bit_exact(self, tmp_path, colors, labels):
        rng = np.random.default_rng(hash((colors, labels)) % 2**32)
        cloud = make_cloud(rng, colors=colors, labels=labels)
        path = tmp_path / "a.crs"
        write_scene(cloud, path, taxonomy=default_taxonomy())
        back = read_scene(path)
        assert (back.coords == cloud.coords).all()
        if colors:
            assert (back.colors == cloud.colors).all()
        else:
            assert back.colors is None
        if labels:
            assert (back.labels == cloud.labels).all()
        else:
            assert back.labels is None

    def test_scene_id_from_stem(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = make_cloud(rng, n=3)
        path = tmp_path / "tile_007.crs"
        write_scene(cloud, path)
        assert read_scene(path).scene_id == "tile_007"
        assert read_scene(path, scene_id="x").scene_id == "x"


class TestNativeErrors:
    def test_truncated_header(self, tmp_path):
        path = tmp_path / "t.crs"
        path.write_bytes(MAGIC + b"\x00" * 10)
        with pytest.raises(SceneFormatError) as e:
            read_scene(path)
        assert e.value.offset == 18
        assert "truncated" in str(e.value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.crs"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 24)
        with pytest.raises(SceneFormatError) as e:
            read_scene(path)
        assert e.value.offset == 0

    def test_zero_count(self, tmp_path):
        path = tmp_path / "t.crs"
        path.write_bytes(MAGIC + struct.pack("<QQQ", 0, 0, 0))
        with pytest.raises(SceneFormatError) as e:
            read_scene(path)
        assert e.value.offset == 8

    def test_unknown_flags(self, tmp_path):
        path = tmp_path / "t.crs"
        path.write_bytes(MAGIC + struct.pack("<QQQ", 1, 0x8, 0) + b"\x00" * 24)
        with pytest.raises(SceneFormatError) as e:
            read_scene(path)
        assert e.value.offset == 16

    def test_flag_array_mismatch(self, tmp_path):
        # Claims labels but the payload holds only coordinates.
        path = tmp_path / "t.crs"
        n = 4
        body = np.zeros((n, 3)).tobytes()
        path.write_bytes(MAGIC + struct.pack("<QQQ", n, FLAG_HAS_LABELS, 0) + body)
        with pytest.raises(SceneFormatError) as e:
            read_scene(path)
        msg = str(e.value)
        assert "expected" in msg and "found" in msg

    def test_error_reports_offset_in_message(self, tmp_path):
        path = tmp_path / "t.crs"
        path.write_bytes(b"xx")
        with pytest.raises(SceneFormatError, match=r"byte offset 2"):
            read_scene(path)


class TestPly:
    @pytest.mark.parametrize("binary", [True, False])
    def test_round_trip(self, tmp_path, binary):
        rng = np.random.default_rng(7)
        cloud = make_cloud(rng, n=20)
        path = tmp_path / "a.ply"
        export_ply(cloud, path, binary=binary)
        back = import_ply(path)
        # Coordinates pass through float32 on export.
        assert np.allclose(back.coords, cloud.coords.astype(np.float32), atol=0)
        assert (back.colors == cloud.colors).all()
        assert (back.labels == cloud.labels).all()

    def test_coords_only(self, tmp_path):
        rng = np.random.default_rng(8)
        cloud = make_cloud(rng, n=5, colors=False, labels=False)
        path = tmp_path / "b.ply"
        export_ply(cloud, path)
        back = import_ply(path)
        assert back.colors is None and back.labels is None

    def test_segment_alias(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property int segment\nend_header\n"
            "0 0 0 3\n1 1 1 5\n"
        )
        path = tmp_path / "seg.ply"
        path.write_text(text)
        back = import_ply(path)
        assert (back.labels == np.array([3, 5])).all()

    def test_header_comments_skipped(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
            "1.5 2.5 3.5\n"
        )
        path = tmp_path / "c.ply"
        path.write_text(text)
        back = import_ply(path)
        assert np.allclose(back.coords, [[1.5, 2.5, 3.5]])

    def test_not_ply(self, tmp_path):
        path = tmp_path / "no.ply"
        path.write_text("obj\nend_header\n")
        with pytest.raises(PlyFormatError):
            import_ply(path)

    def test_missing_xyz(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nend_header\n1 2\n"
        )
        path = tmp_path / "m.ply"
        path.write_text(text)
        with pytest.raises(PlyFormatError, match="not a point cloud"):
            import_ply(path)

    def test_list_property_rejected(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        path = tmp_path / "l.ply"
        path.write_text(text)
        with pytest.raises(PlyFormatError):
            import_ply(path)

    def test_vertex_must_come_first(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\nelement face 0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"
        )
        path = tmp_path / "v.ply"
        path.write_text(text)
        with pytest.raises(PlyFormatError):
            import_ply(path)

    def test_truncated_ascii(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
            "1 2 3\n4 5 6\n"
        )
        path = tmp_path / "trunc.ply"
        path.write_text(text)
        with pytest.raises(PlyFormatError, match="truncated"):
            import_ply(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = (
            SceneEntry("a", "scenes/a.crs", "train", 100),
            SceneEntry("b", "scenes/b.crs", "val", 200),
            SceneEntry("c", "scenes/c.crs", "test", 300),
        )
        man = SceneManifest(entries=entries)
        path = tmp_path / "manifest.tsv"
        man.save(path)
        back = SceneManifest.load(path)
        assert back.entries == entries

    def test_unique_ids(self):
        with pytest.raises(ManifestError):
            SceneManifest(
                entries=(
                    SceneEntry("a", "x", "train", 1),
                    SceneEntry("a", "y", "val", 2),
                )
            )

    def test_split_filter_and_counts(self):
        man = SceneManifest(
            entries=(
                SceneEntry("a", "x", "train", 1),
                SceneEntry("b", "y", "train", 2),
                SceneEntry("c", "z", "test", 3),
            )
        )
        assert [e.scene_id for e in man.split("train")] == ["a", "b"]
        assert man.split_counts() == {"train": 2, "val": 0, "test": 1}
        with pytest.raises(ManifestError):
            man.split("holdout")

    def test_unknown_split_rejected(self):
        with pytest.raises(ManifestError):
            SceneEntry("a", "x", "dev", 1)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a\tb\ttrain\n")
        with pytest.raises(ManifestError, match="line 1"):
            SceneManifest.load(path)
