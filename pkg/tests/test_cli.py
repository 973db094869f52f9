"""CLI subcommand behavior, artifact files, and exit codes.

A session-scoped fixture builds one small benchmark and trains both branches
briefly, so the predict/fuse/verify/eval commands run against real
checkpoints without retraining in every test.
"""

import shutil
import subprocess

import numpy as np
import pytest

from corrseg.cli import (
    load_field,
    load_prediction,
    main,
    save_field,
    save_prediction,
)
from corrseg.model import CorrsegError, Prediction, ProbabilityField
from corrseg.sceneio import SceneManifest, read_scene


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Benchmark of 4 scenes plus briefly trained global and local checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    bench = root / "bench"
    assert main(["synth", "--out", str(bench), "--n-scenes", "4", "--seed", "3"]) == 0
    manifest = str(bench / "manifest.tsv")
    assert main(["train", "--manifest", manifest, "--branch", "global",
                 "--out", str(root / "g.npz"), "--epochs", "6"]) == 0
    assert main(["train", "--manifest", manifest, "--branch", "local",
                 "--out", str(root / "l.npz"), "--epochs", "6",
                 "--k-local", "6000"]) == 0
    scene = str(bench / "scene_0003.cors")
    assert main(["predict", "--ckpt", str(root / "g.npz"), "--scene", scene,
                 "--out", str(root / "fg.npz")]) == 0
    assert main(["predict", "--ckpt", str(root / "l.npz"), "--scene", scene,
                 "--out", str(root / "fl.npz")]) == 0
    return {
        "root": root,
        "bench": bench,
        "manifest": manifest,
        "scene": scene,
        "global_field": str(root / "fg.npz"),
        "local_field": str(root / "fl.npz"),
    }


class TestArtifactFiles:
    def test_field_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(22), size=40)
        field = ProbabilityField(probs=probs, source="local")
        path = tmp_path / "f.npz"
        save_field(path, field, scene_id="s1")
        back, sid = load_field(path)
        assert sid == "s1"
        assert back.source == "local"
        np.testing.assert_array_equal(back.probs, field.probs)

    def test_prediction_round_trip(self, tmp_path):
        pred = Prediction(labels=np.array([1, 2, 3]), provenance="geo-verified")
        path = tmp_path / "p.npz"
        save_prediction(path, pred, scene_id="s2")
        back, sid = load_prediction(path)
        assert sid == "s2"
        assert back.provenance == "geo-verified"
        np.testing.assert_array_equal(back.labels, pred.labels)

    def test_load_field_missing(self, tmp_path):
        with pytest.raises(CorrsegError):
            load_field(tmp_path / "absent.npz")

    def test_load_field_wrong_keys(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, other=np.ones(3))
        with pytest.raises(CorrsegError):
            load_field(path)


class TestExitCodes:
    def test_no_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["transmogrify"])
        assert e.value.code == 2

    def test_missing_file_is_domain_error(self, tmp_path, capsys):
        code = main(["stats", "--manifest", str(tmp_path / "none.tsv")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_config_is_domain_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("fusion.allpha = 0.5\n", encoding="utf-8")
        code = main(["stats", "--config", str(cfg), "--manifest", "x.tsv"])
        assert code == 1


class TestSynth:
    def test_benchmark_outputs(self, workspace):
        manifest = SceneManifest.load(workspace["manifest"])
        assert len(manifest) == 4
        assert manifest.split_counts() == {"train": 2, "val": 0, "test": 2}
        cloud = read_scene(workspace["bench"] / "scene_0000.cors")
        assert len(cloud) > 1000

    def test_single_scene_spec_mode(self, tmp_path, capsys):
        spec = tmp_path / "scene.cfg"
        spec.write_text("span = 60\nn_conductors = 1\ntower_type = tension\n",
                        encoding="utf-8")
        out = tmp_path / "one.cors"
        code = main(["synth", "--spec", str(spec), "--out", str(out), "--seed", "7"])
        assert code == 0
        cloud = read_scene(out)
        assert 12 in np.unique(cloud.labels)  # tension scenes carry strain insulators
        assert "count.strain_insulator=" in capsys.readouterr().out

    def test_bad_spec_key_fails(self, tmp_path):
        spec = tmp_path / "scene.cfg"
        spec.write_text("wingspan = 60\n", encoding="utf-8")
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "x.cors")]) == 1

    def test_jobs_do_not_change_output(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["synth", "--out", str(a), "--n-scenes", "3", "--seed", "5"]) == 0
        assert main(["synth", "--out", str(b), "--n-scenes", "3", "--seed", "5",
                     "--jobs", "2"]) == 0
        for name in ("manifest.tsv", "scene_0000.cors", "scene_0002.cors"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestStats:
    def test_summary_and_shares(self, workspace, capsys):
        assert main(["stats", "--manifest", workspace["manifest"]]) == 0
        out = capsys.readouterr().out
        assert "split=train" in out
        assert "share.ground_vegetation" in out

    def test_tsv_written(self, workspace, tmp_path):
        tsv = tmp_path / "stats.tsv"
        assert main(["stats", "--manifest", workspace["manifest"],
                     "--tsv", str(tsv)]) == 0
        lines = tsv.read_text(encoding="utf-8").strip().split("\n")
        assert lines[0].startswith("scene_id\tsplit\tpoints")
        assert len(lines) == 5

    def test_split_filter(self, workspace, capsys):
        assert main(["stats", "--manifest", workspace["manifest"],
                     "--split", "test"]) == 0
        out = capsys.readouterr().out
        assert "split=test" in out
        assert "split=train" not in out


class TestVoxelize:
    def test_reduces_points(self, workspace, tmp_path, capsys):
        out = tmp_path / "vox.cors"
        code = main(["voxelize", "--in", workspace["scene"], "--out", str(out),
                     "--grid", "1.0"])
        assert code == 0
        original = read_scene(workspace["scene"])
        vox = read_scene(out)
        assert 0 < len(vox) < len(original)
        assert vox.labels is not None


class TestPredictFuse:
    def test_field_matches_scene(self, workspace):
        field, sid = load_field(workspace["global_field"])
        cloud = read_scene(workspace["scene"])
        assert len(field) == len(cloud)
        assert field.source == "global"
        assert sid == "scene_0003"

    def test_taxonomy_mismatch_rejected(self, workspace, tmp_path, capsys):
        from corrseg.trainer import load_checkpoint, save_checkpoint

        result, _ = load_checkpoint(workspace["root"] / "g.npz")
        bad = tmp_path / "bad.npz"
        save_checkpoint(bad, result, taxonomy_hash=123456789)
        code = main(["predict", "--ckpt", str(bad), "--scene", workspace["scene"],
                     "--out", str(tmp_path / "f.npz")])
        assert code == 1
        assert "taxonomy" in capsys.readouterr().err

    def test_fuse_writes_fused_field(self, workspace, tmp_path):
        out = tmp_path / "fused.npz"
        code = main(["fuse", "--local", workspace["local_field"],
                     "--global", workspace["global_field"],
                     "--alpha", "0.3", "--out", str(out)])
        assert code == 0
        fused, sid = load_field(out)
        assert fused.source == "fused"
        assert sid == "scene_0003"
        local, _ = load_field(workspace["local_field"])
        global_, _ = load_field(workspace["global_field"])
        np.testing.assert_allclose(
            fused.probs, 0.3 * local.probs + 0.7 * global_.probs, atol=1e-12
        )

    def test_fuse_scene_mismatch_rejected(self, workspace, tmp_path):
        other = tmp_path / "other.npz"
        field, _ = load_field(workspace["local_field"])
        save_field(other, field, scene_id="different_scene")
        code = main(["fuse", "--local", str(other),
                     "--global", workspace["global_field"],
                     "--out", str(tmp_path / "f.npz")])
        assert code == 1

    def test_tune_alpha_prints_star_and_curve(self, workspace, tmp_path, capsys):
        tsv = tmp_path / "curve.tsv"
        code = main(["tune-alpha", "--local", workspace["local_field"],
                     "--global", workspace["global_field"],
                     "--scene", workspace["scene"], "--tsv", str(tsv)])
        assert code == 0
        out = capsys.readouterr().out
        assert "alpha_star=" in out
        lines = tsv.read_text(encoding="utf-8").strip().split("\n")
        assert lines[0] == "alpha\tmiou"
        assert len(lines) == 52  # 51 grid points


class TestVerifyEval:
    def test_verify_then_eval(self, workspace, tmp_path, capsys):
        fused = tmp_path / "fused.npz"
        assert main(["fuse", "--local", workspace["local_field"],
                     "--global", workspace["global_field"],
                     "--alpha", "0.5", "--out", str(fused)]) == 0
        pred = tmp_path / "pred.npz"
        reports = tmp_path / "reports.tsv"
        code = main(["verify", "--scene", workspace["scene"], "--fused", str(fused),
                     "--out", str(pred), "--reports", str(reports)])
        assert code == 0
        loaded, _ = load_prediction(pred)
        assert loaded.provenance == "geo-verified"
        assert reports.read_text(encoding="utf-8").startswith("class\t")
        metrics = tmp_path / "metrics.tsv"
        code = main(["eval", "--scene", workspace["scene"], "--pred", str(pred),
                     "--tsv", str(metrics)])
        assert code == 0
        out = capsys.readouterr().out
        assert "miou=" in out
        text = metrics.read_text(encoding="utf-8")
        assert text.startswith("class\tname\tiou")
        assert "mIoU" in text

    def test_verify_field_scene_mismatch(self, workspace, tmp_path):
        short = tmp_path / "short.npz"
        field, _ = load_field(workspace["global_field"])
        save_field(short, ProbabilityField(probs=field.probs[:10], source="fused"))
        code = main(["verify", "--scene", workspace["scene"], "--fused", str(short),
                     "--out", str(tmp_path / "p.npz")])
        assert code == 1


class TestConfigPlumbing:
    def test_config_file_alpha_used_by_fuse(self, workspace, tmp_path):
        cfg = tmp_path / "my.cfg"
        cfg.write_text("fusion.alpha = 1.0\n", encoding="utf-8")
        out = tmp_path / "fused.npz"
        code = main(["fuse", "--config", str(cfg),
                     "--local", workspace["local_field"],
                     "--global", workspace["global_field"], "--out", str(out)])
        assert code == 0
        fused, _ = load_field(out)
        local, _ = load_field(workspace["local_field"])
        np.testing.assert_allclose(fused.probs, local.probs, atol=1e-12)

    def test_env_config_honored(self, workspace, tmp_path, monkeypatch):
        cfg = tmp_path / "env.cfg"
        cfg.write_text("fusion.alpha = 0.0\n", encoding="utf-8")
        monkeypatch.setenv("CORRSEG_CONFIG", str(cfg))
        out = tmp_path / "fused.npz"
        assert main(["fuse", "--local", workspace["local_field"],
                     "--global", workspace["global_field"], "--out", str(out)]) == 0
        fused, _ = load_field(out)
        global_, _ = load_field(workspace["global_field"])
        np.testing.assert_allclose(fused.probs, global_.probs, atol=1e-12)


@pytest.mark.skipif(shutil.which("corrseg") is None, reason="console script not installed")
def test_console_script_runs():
    proc = subprocess.run(["corrseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "pipeline" in proc.stdout
