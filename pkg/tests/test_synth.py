"""Generator bookkeeping, geometric fidelity, and benchmark determinism."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from corrseg.model import CorrsegError
from corrseg.sceneio import SceneManifest, read_scene
from corrseg.synth import (
    PROFILES,
    TOWER_TYPES,
    Component,
    CorridorSpec,
    a_from_sag,
    catenary_z,
    generate,
    make_benchmark,
)

GROUND_VEG = (2, 8, 9)
ATTACHMENTS = (0, 12, 13, 14, 18)


class TestSpec:
    def test_defaults_valid(self):
        spec = CorridorSpec()
        assert spec.tower_type in TOWER_TYPES

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"span": 0.0},
            {"span": -5.0},
            {"catenary_a": 0.0},
            {"noise_sigma": -0.1},
            {"tower_type": "pylon"},
            {"n_conductors": 0},
            {"n_towers": -1},
            {"wire_step": 0.0},
            {"veg_points": -2},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValueError):
            CorridorSpec(**kwargs)


class TestGenerate:
    def test_deterministic_for_seed(self):
        a = generate(CorridorSpec(seed=21))
        b = generate(CorridorSpec(seed=21))
        assert a.cloud.coords.tobytes() == b.cloud.coords.tobytes()
        assert a.cloud.labels.tobytes() == b.cloud.labels.tobytes()
        assert a.counts == b.counts

    def test_seed_changes_output(self):
        a = generate(CorridorSpec(seed=1))
        b = generate(CorridorSpec(seed=2))
        assert a.cloud.coords.tobytes() != b.cloud.coords.tobytes()

    @pytest.mark.parametrize("tower_type", TOWER_TYPES)
    def test_counts_match_labels_exactly(self, tower_type):
        result = generate(CorridorSpec(tower_type=tower_type, seed=7))
        n = len(result.cloud)
        assert sum(result.counts.values()) == n
        recount = np.bincount(result.cloud.labels, minlength=22)
        for cid in range(22):
            assert result.counts.get(cid, 0) == recount[cid]

    @pytest.mark.parametrize("tower_type", TOWER_TYPES)
    def test_long_tail_shares(self, tower_type):
        result = generate(CorridorSpec(tower_type=tower_type, seed=3))
        n = len(result.cloud)
        gv = sum(result.counts.get(c, 0) for c in GROUND_VEG)
        att = sum(result.counts.get(c, 0) for c in ATTACHMENTS)
        assert gv / n >= 0.90
        assert 0.0 < att / n <= 0.01

    def test_vegetation_knob_monotone(self):
        def veg_share(blobs):
            r = generate(CorridorSpec(veg_blobs=blobs, seed=5))
            veg = r.counts.get(8, 0) + r.counts.get(9, 0)
            return veg / len(r.cloud)

        assert veg_share(10) < veg_share(26) < veg_share(50)

    def test_empty_spec_raises(self):
        spec = CorridorSpec(n_towers=0, veg_blobs=0, ground_density=0.0)
        with pytest.raises(CorrsegError):
            generate(spec)

    def test_cloud_has_scene_id_and_valid_labels(self):
        result = generate(CorridorSpec(seed=9))
        assert result.cloud.scene_id
        assert result.cloud.labels is not None
        assert result.cloud.labels.max() < 22


class TestGeometry:
    def test_conductors_on_catenary_at_zero_noise(self):
        result = generate(CorridorSpec(noise_sigma=0.0, seed=4))
        wires = [c for c in result.components
                 if c.kind in ("conductor", "ground_wire", "optical_cable")]
        assert wires
        for comp in wires:
            pts = result.cloud.coords[comp.indices]
            z = catenary_z(pts[:, 0], comp.params["a"], comp.params["x_m"], comp.params["z0"])
            assert np.abs(pts[:, 2] - z).max() <= 1e-9
            assert np.abs(pts[:, 1] - comp.params["y"]).max() <= 1e-9

    def test_single_conductor_centered(self):
        result = generate(CorridorSpec(noise_sigma=0.0, n_conductors=1, seed=4))
        conductors = [c for c in result.components if c.kind == "conductor"]
        for comp in conductors:
            assert comp.params["y"] == 0.0

    def test_wire_sag_positive(self):
        result = generate(CorridorSpec(noise_sigma=0.0, seed=4))
        comp = next(c for c in result.components if c.kind == "conductor")
        pts = result.cloud.coords[comp.indices]
        assert pts[:, 2].min() < pts[0, 2]  # midspan hangs below the attach point

    def test_line_insulator_vertical_at_zero_noise(self):
        result = generate(CorridorSpec(noise_sigma=0.0, seed=6))
        strings = [c for c in result.components if c.kind == "line_insulator"]
        assert strings
        for comp in strings:
            assert comp.orientation == 1.0
            np.testing.assert_allclose(result.cloud.coords[comp.indices[0]], comp.x_start)
            np.testing.assert_allclose(result.cloud.coords[comp.indices[-1]], comp.x_end)
            delta = comp.x_end - comp.x_start
            measured = abs(delta[2]) / np.linalg.norm(delta)
            assert measured == pytest.approx(1.0)

    def test_strain_insulators_near_horizontal(self):
        result = generate(CorridorSpec(tower_type="tension", noise_sigma=0.0, seed=6))
        strains = [c for c in result.components if c.kind == "strain_insulator"]
        assert strains
        for comp in strains:
            delta = comp.x_end - comp.x_start
            measured = abs(delta[2]) / np.linalg.norm(delta)
            assert measured == pytest.approx(comp.orientation, abs=1e-12)
            assert 0.0 <= comp.orientation <= 0.35

    def test_tension_scene_has_jumpers(self):
        result = generate(CorridorSpec(tower_type="tension", seed=6))
        kinds = {c.kind for c in result.components}
        assert "jumper" in kinds and "strain_insulator" in kinds
        assert "line_insulator" not in kinds

    def test_terminal_scene_has_v_strings(self):
        result = generate(CorridorSpec(tower_type="terminal", seed=6))
        kinds = {c.kind for c in result.components}
        assert "v_string" in kinds and "line_insulator" in kinds

    def test_component_indices_disjoint_and_in_range(self):
        result = generate(CorridorSpec(tower_type="tension", seed=8))
        seen = np.zeros(len(result.cloud), dtype=bool)
        for comp in result.components:
            assert isinstance(comp, Component)
            assert comp.indices.min() >= 0
            assert comp.indices.max() < len(result.cloud)
            assert not seen[comp.indices].any()
            seen[comp.indices] = True
            np.testing.assert_array_equal(
                result.cloud.labels[comp.indices], comp.class_id
            )

    def test_vegetation_clipped_at_ground(self):
        result = generate(CorridorSpec(seed=10))
        veg = np.isin(result.cloud.labels, (8, 9))
        assert result.cloud.coords[veg, 2].min() >= -0.2  # never below the terrain dip


class TestSagSolver:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            span = rng.uniform(50.0, 400.0)
            sag = rng.uniform(0.5, 12.0)
            a = a_from_sag(span, sag)
            assert a * (np.cosh(span / (2 * a)) - 1.0) == pytest.approx(sag, rel=1e-9)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            a_from_sag(0.0, 2.0)
        with pytest.raises(ValueError):
            a_from_sag(100.0, -1.0)


class TestBenchmark:
    def test_split_floor_rule(self, tmp_path):
        manifest, _ = make_benchmark(tmp_path, 10, seed=4)
        assert manifest.split_counts() == {"train": 7, "val": 1, "test": 2}

    def test_split_floor_rule_odd(self, tmp_path):
        manifest, _ = make_benchmark(tmp_path, 9, seed=4)
        # floor(6.3)=6 train, floor(1.35)=1 val, remainder 2 test.
        assert manifest.split_counts() == {"train": 6, "val": 1, "test": 2}

    def test_requires_three_scenes(self, tmp_path):
        with pytest.raises(CorrsegError):
            make_benchmark(tmp_path, 2, seed=0)

    def test_unknown_profile(self, tmp_path):
        with pytest.raises(CorrsegError):
            make_benchmark(tmp_path, 5, profile="imaginary", seed=0)

    def test_scenes_readable_and_counts_exact(self, tmp_path):
        manifest, totals = make_benchmark(tmp_path, 6, seed=2)
        assert len(manifest) == 6
        recount = np.zeros(22, dtype=np.int64)
        for entry in manifest.entries:
            cloud = read_scene(tmp_path / entry.path, scene_id=entry.scene_id)
            assert len(cloud) == entry.point_count
            recount += np.bincount(cloud.labels, minlength=22)
        for cid in range(22):
            assert totals.get(cid, 0) == recount[cid]
        loaded = SceneManifest.load(tmp_path / "manifest.tsv")
        assert len(loaded) == 6

    def test_regeneration_byte_identical(self, tmp_path):
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        make_benchmark(d1, 4, seed=9)
        make_benchmark(d2, 4, seed=9)
        for name in sorted(p.name for p in Path(d1).iterdir()):
            h1 = hashlib.sha256((d1 / name).read_bytes()).hexdigest()
            h2 = hashlib.sha256((d2 / name).read_bytes()).hexdigest()
            assert h1 == h2, name

    def test_profiles_shift_shares(self, tmp_path):
        _, base = make_benchmark(tmp_path / "base", 3, profile="default", seed=5)
        _, veg = make_benchmark(tmp_path / "veg", 3, profile="veg-heavy", seed=5)
        assert "veg-heavy" in PROFILES
        veg_share = lambda t: (t.get(8, 0) + t.get(9, 0)) / sum(t.values())
        assert veg_share(veg) > veg_share(base)

    def test_tower_types_cycle(self, tmp_path):
        manifest, totals = make_benchmark(tmp_path, 3, seed=1)
        # One scene of each type: strain insulators, V-strings, and vertical
        # strings all appear in the aggregate.
        assert totals.get(12, 0) > 0
        assert totals.get(13, 0) > 0
        assert totals.get(18, 0) > 0
