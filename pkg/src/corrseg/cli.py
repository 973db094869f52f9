"""Command-line surface for the corridor segmentation pipeline.

Subcommands cover every stage: scene synthesis, dataset statistics,
voxelization, branch training, prediction, probability fusion, alpha tuning,
geometric verification, evaluation, and an end-to-end pipeline. Exit codes:
0 success, 1 domain error (bad data, missing files, failed invariants),
2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from corrseg.config import PipelineConfig, load_config
from corrseg.evalstats import (
    ConfusionMatrix,
    class_shares,
    confusion_matrix,
    iou_per_class,
    metrics_tsv,
    scene_stats,
    split_summary,
)
from corrseg.fusion import alpha_curve_tsv, fuse, preliminary_labels, tune_alpha
from corrseg.geoverify import reports_tsv, verify_and_relabel
from corrseg.model import (
    CorrsegError,
    Prediction,
    ProbabilityField,
    argmax_labels,
)
from corrseg.sampling import grid_sample
from corrseg.sceneio import SceneManifest, read_scene, write_scene
from corrseg.synth import CorridorSpec, generate, make_benchmark
from corrseg.trainer import BRANCHES, load_checkpoint, predict, save_checkpoint, train_branch

__all__ = [
    "build_parser",
    "main",
    "run",
    "save_field",
    "load_field",
    "save_prediction",
    "load_prediction",
]


# ---------------------------------------------------------------------------
# Pipeline artifact files: probability fields and predictions as .npz.

def save_field(path, field: ProbabilityField, scene_id: str = "") -> None:
    np.savez_compressed(
        path, probs=field.probs, source=np.array(field.source), scene_id=np.array(scene_id)
    )


def load_field(path) -> tuple:
    """Returns (ProbabilityField, scene_id)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            probs = z["probs"]
            source = str(z["source"])
            scene_id = str(z["scene_id"])
    except (OSError, KeyError, ValueError) as exc:
        raise CorrsegError(f"cannot read probability field {path}: {exc}")
    return ProbabilityField(probs=probs, source=source), scene_id


def save_prediction(path, pred: Prediction, scene_id: str = "") -> None:
    np.savez_compressed(
        path, labels=pred.labels, provenance=np.array(pred.provenance),
        scene_id=np.array(scene_id),
    )


def load_prediction(path) -> tuple:
    """Returns (Prediction, scene_id)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            labels = z["labels"]
            provenance = str(z["provenance"])
            scene_id = str(z["scene_id"])
    except (OSError, KeyError, ValueError) as exc:
        raise CorrsegError(f"cannot read prediction {path}: {exc}")
    return Prediction(labels=labels, provenance=provenance), scene_id


# ---------------------------------------------------------------------------
# Shared helpers.

def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(
            cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed)
        )
    return cfg


def _manifest_scenes(manifest_path, split=None):
    manifest_path = Path(manifest_path)
    manifest = SceneManifest.load(manifest_path)
    entries = manifest.entries if split in (None, "all") else manifest.split(split)
    clouds = [
        read_scene(manifest_path.parent / e.path, scene_id=e.scene_id) for e in entries
    ]
    return manifest, list(entries), clouds


def _spec_from_file(path, seed) -> CorridorSpec:
    from corrseg.config import parse_flat_config

    text = Path(path).read_text(encoding="utf-8")
    mapping = parse_flat_config(text)
    fields = {f.name: f.type for f in CorridorSpec.__dataclass_fields__.values()}
    kwargs = {}
    for key, value in mapping.items():
        if key not in fields:
            raise CorrsegError(f"unknown scene spec key {key!r}")
        typ = {"span": float, "corridor_width": float, "catenary_a": float,
               "ground_density": float, "wire_step": float, "noise_sigma": float,
               "tower_type": str}.get(key, int)
        kwargs[key] = typ(value)
    if seed is not None:
        kwargs["seed"] = seed
    return CorridorSpec(**kwargs)


def _echo(line: str) -> None:
    print(line)


# ---------------------------------------------------------------------------
# Subcommand implementations.

def _cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    seed = cfg.seed if args.seed is None else args.seed
    if args.spec:
        spec = _spec_from_file(args.spec, args.seed)
        result = generate(spec)
        write_scene(result.cloud, args.out, taxonomy=cfg.taxonomy)
        _echo(f"scene={args.out} points={len(result.cloud)}")
        for cid in sorted(result.counts):
            _echo(f"count.{cfg.taxonomy.name_of(cid)}={result.counts[cid]}")
        return 0
    manifest, totals = make_benchmark(
        args.out, args.n_scenes, profile=args.profile, seed=seed, jobs=args.jobs
    )
    counts = manifest.split_counts()
    total = sum(totals.values())
    _echo(f"manifest={Path(args.out) / 'manifest.tsv'} scenes={len(manifest)}")
    _echo(f"splits train={counts['train']} val={counts['val']} test={counts['test']}")
    _echo(f"points={total}")
    return 0


def _cmd_stats(args) -> int:
    cfg = _load_cfg(args)
    manifest, entries, clouds = _manifest_scenes(args.manifest, args.split)
    by_split = {}
    rows = []
    for entry, cloud in zip(entries, clouds):
        stats = scene_stats(cloud)
        by_split.setdefault(entry.split, []).append(stats)
        rows.append((entry.scene_id, entry.split, stats))
    summary = split_summary(by_split)
    for split in sorted(summary):
        parts = " ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in summary[split].items())
        _echo(f"split={split} {parts}")
    labeled = [c for c in clouds if c.labels is not None]
    if labeled:
        shares = class_shares(labeled, num_classes=cfg.taxonomy.num_classes)
        for group in sorted(shares):
            count, share = shares[group]
            _echo(f"share.{group} count={count} share={share:.6f}")
    if args.tsv:
        lines = ["scene_id\tsplit\tpoints\tobb_length\tobb_width\tfootprint\tdensity"]
        for scene_id, split, s in rows:
            density = f"{s.density:.6f}" if s.density_defined else "undefined"
            lines.append(
                f"{scene_id}\t{split}\t{s.point_count}\t{s.obb_length:.3f}\t"
                f"{s.obb_width:.3f}\t{s.footprint:.3f}\t{density}"
            )
        Path(args.tsv).write_text("\n".join(lines) + "\n", encoding="utf-8")
        _echo(f"tsv={args.tsv}")
    return 0


def _cmd_voxelize(args) -> int:
    cfg = _load_cfg(args)
    grid = args.grid if args.grid is not None else cfg.train.grid_size
    cloud = read_scene(args.infile)
    sampled = grid_sample(cloud, grid, majority_labels=True).sampled
    write_scene(sampled, args.out, taxonomy=cfg.taxonomy)
    _echo(f"scene={args.out} points={len(sampled)} from={len(cloud)} grid={grid:g}")
    return 0


def _train_cfg(args, cfg: PipelineConfig):
    train = cfg.train
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)
    if getattr(args, "k_local", None) is not None:
        train = replace(train, k_local=args.k_local)
    return train


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_cfg = _train_cfg(args, cfg)
    _, entries, clouds = _manifest_scenes(args.manifest, args.split)
    if not clouds:
        raise CorrsegError(f"no scenes in split {args.split!r}")
    for cloud in clouds:
        cloud.check_labels(cfg.taxonomy)
    result = train_branch(clouds, args.branch, train_cfg, cfg.taxonomy.num_classes)
    save_checkpoint(args.out, result, taxonomy_hash=cfg.taxonomy.config_hash())
    _echo(
        f"checkpoint={args.out} branch={args.branch} scenes={len(clouds)} "
        f"final_loss={result.loss_curve[-1]:.6f}"
    )
    return 0


def _cmd_predict(args) -> int:
    cfg = _load_cfg(args)
    result, tax_hash = load_checkpoint(args.ckpt)
    if tax_hash and tax_hash != cfg.taxonomy.config_hash():
        raise CorrsegError("checkpoint was trained under a different taxonomy")
    cloud = read_scene(args.scene)
    field = predict(result, cloud)
    save_field(args.out, field, scene_id=cloud.scene_id)
    _echo(f"field={args.out} source={field.source} points={len(field)}")
    return 0


def _cmd_fuse(args) -> int:
    cfg = _load_cfg(args)
    alpha = cfg.alpha if args.alpha is None else args.alpha
    local, sid_l = load_field(args.local)
    global_, sid_g = load_field(args.global_field)
    if sid_l and sid_g and sid_l != sid_g:
        raise CorrsegError(f"fields describe different scenes: {sid_l!r} vs {sid_g!r}")
    fused = fuse(local, global_, alpha)
    save_field(args.out, fused, scene_id=sid_l or sid_g)
    _echo(f"field={args.out} alpha={alpha:g} points={len(fused)}")
    return 0


def _cmd_tune_alpha(args) -> int:
    cfg = _load_cfg(args)
    local, _ = load_field(args.local)
    global_, _ = load_field(args.global_field)
    cloud = read_scene(args.scene)
    if cloud.labels is None:
        raise CorrsegError("tune-alpha needs a labeled scene")
    best, curve = tune_alpha(local, global_, cloud.labels, cfg.taxonomy)
    _echo(f"alpha_star={best:.2f}")
    if args.tsv:
        Path(args.tsv).write_text(alpha_curve_tsv(curve), encoding="utf-8")
        _echo(f"tsv={args.tsv}")
    return 0


def _cmd_verify(args) -> int:
    cfg = _load_cfg(args)
    tau = cfg.tau_geo if args.tau_geo is None else args.tau_geo
    fused, sid = load_field(args.fused)
    cloud = read_scene(args.scene)
    if len(fused) != len(cloud):
        raise CorrsegError("field and scene point counts differ")
    pred = preliminary_labels(fused)
    verified, reports = verify_and_relabel(
        pred, fused, cloud.coords, params=cfg.dbscan, registry=cfg.registry, tau_geo=tau
    )
    save_prediction(args.out, verified, scene_id=sid or cloud.scene_id)
    changed = int(np.sum(verified.labels != pred.labels))
    relabeled = sum(1 for r in reports if r.decision == "relabel")
    _echo(
        f"prediction={args.out} clusters={len(reports)} relabeled_clusters={relabeled} "
        f"changed_points={changed}"
    )
    if args.reports:
        Path(args.reports).write_text(reports_tsv(reports), encoding="utf-8")
        _echo(f"reports={args.reports}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    pred, _ = load_prediction(args.pred)
    cloud = read_scene(args.scene)
    if cloud.labels is None:
        raise CorrsegError("eval needs a labeled scene")
    iou, miou = iou_per_class(pred.labels, np.asarray(cloud.labels, dtype=np.int64), cfg.taxonomy)
    _echo(f"miou={miou:.6f}")
    if args.tsv:
        Path(args.tsv).write_text(metrics_tsv(iou, miou, cfg.taxonomy), encoding="utf-8")
        _echo(f"tsv={args.tsv}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    train_cfg = _train_cfg(args, cfg)
    tax = cfg.taxonomy
    work = Path(args.workdir)
    scenes_dir = work / "scenes"
    work.mkdir(parents=True, exist_ok=True)

    manifest, _ = make_benchmark(scenes_dir, args.n_scenes, seed=cfg.seed)
    _, entries, clouds = _manifest_scenes(scenes_dir / "manifest.tsv")
    by_split = {"train": [], "val": [], "test": []}
    for entry, cloud in zip(entries, clouds):
        by_split[entry.split].append(cloud)
    _echo(
        f"scenes={len(clouds)} train={len(by_split['train'])} "
        f"val={len(by_split['val'])} test={len(by_split['test'])}"
    )

    results = {}
    for branch in BRANCHES:
        results[branch] = train_branch(by_split["train"], branch, train_cfg, tax.num_classes)
        save_checkpoint(work / f"{branch}.npz", results[branch],
                        taxonomy_hash=tax.config_hash())
        _echo(f"trained branch={branch} final_loss={results[branch].loss_curve[-1]:.6f}")

    # Tune alpha on the validation split, pooling rows across scenes.
    val = by_split["val"] or by_split["train"][-1:]
    local_rows = np.concatenate([predict(results["local"], c).probs for c in val])
    global_rows = np.concatenate([predict(results["global"], c).probs for c in val])
    val_labels = np.concatenate([np.asarray(c.labels, dtype=np.int64) for c in val])
    best_alpha, curve = tune_alpha(
        ProbabilityField(probs=local_rows, source="local"),
        ProbabilityField(probs=global_rows, source="global"),
        val_labels,
        tax,
    )
    (work / "alpha_curve.tsv").write_text(alpha_curve_tsv(curve), encoding="utf-8")
    _echo(f"alpha_star={best_alpha:.2f}")

    test = by_split["test"]
    cms = {"local": ConfusionMatrix.empty(tax.num_classes),
           "global": ConfusionMatrix.empty(tax.num_classes),
           "fused": ConfusionMatrix.empty(tax.num_classes),
           "verified": ConfusionMatrix.empty(tax.num_classes)}
    all_reports = []
    for cloud in test:
        gt = np.asarray(cloud.labels, dtype=np.int64)
        local_field = predict(results["local"], cloud)
        global_field = predict(results["global"], cloud)
        fused = fuse(local_field, global_field, best_alpha)
        pred = preliminary_labels(fused)
        verified, reports = verify_and_relabel(
            pred, fused, cloud.coords, params=cfg.dbscan, registry=cfg.registry,
            tau_geo=cfg.tau_geo,
        )
        all_reports.extend(reports)
        cms["local"] += confusion_matrix(argmax_labels(local_field).labels, gt, tax)
        cms["global"] += confusion_matrix(argmax_labels(global_field).labels, gt, tax)
        cms["fused"] += confusion_matrix(pred.labels, gt, tax)
        cms["verified"] += confusion_matrix(verified.labels, gt, tax)

    for name, cm in cms.items():
        iou, miou = iou_per_class(cm, None, tax)
        (work / f"metrics_{name}.tsv").write_text(metrics_tsv(iou, miou, tax),
                                                  encoding="utf-8")
        _echo(f"miou_{name}={miou:.6f}")
    (work / "reports.tsv").write_text(reports_tsv(all_reports), encoding="utf-8")
    _echo(f"workdir={work}")
    return 0


# ---------------------------------------------------------------------------
# Parser.

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrseg",
        description="Transmission-corridor point-cloud segmentation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="pipeline config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        return p

    p = common(sub.add_parser("synth", help="generate scenes"))
    p.add_argument("--out", required=True, help="benchmark directory, or scene file with --spec")
    p.add_argument("--n-scenes", type=int, default=8)
    p.add_argument("--profile", default="default")
    p.add_argument("--spec", default=None, help="scene spec file, single-scene mode")
    p.add_argument("--jobs", type=int, default=1, help="parallel scene generation")
    p.set_defaults(func=_cmd_synth)

    p = common(sub.add_parser("stats", help="dataset statistics"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--tsv", default=None, help="write per-scene stats TSV")
    p.set_defaults(func=_cmd_stats)

    p = common(sub.add_parser("voxelize", help="grid-sample a scene"))
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=float, default=None)
    p.set_defaults(func=_cmd_voxelize)

    p = common(sub.add_parser("train", help="train one branch"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--branch", required=True, choices=list(BRANCHES))
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["all", "train", "val", "test"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k-local", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = common(sub.add_parser("predict", help="probability field for a scene"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = common(sub.add_parser("fuse", help="blend local and global fields"))
    p.add_argument("--local", required=True)
    p.add_argument("--global", dest="global_field", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = common(sub.add_parser("tune-alpha", help="sweep alpha on a labeled scene"))
    p.add_argument("--local", required=True)
    p.add_argument("--global", dest="global_field", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--tsv", default=None)
    p.set_defaults(func=_cmd_tune_alpha)

    p = common(sub.add_parser("verify", help="geometric verification of a fused field"))
    p.add_argument("--scene", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-geo", type=float, default=None)
    p.add_argument("--reports", default=None)
    p.set_defaults(func=_cmd_verify)

    p = common(sub.add_parser("eval", help="IoU metrics for a prediction"))
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--tsv", default=None)
    p.set_defaults(func=_cmd_eval)

    p = common(sub.add_parser("pipeline", help="synth, train, fuse, verify, eval"))
    p.add_argument("--workdir", required=True)
    p.add_argument("--n-scenes", type=int, default=8)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k-local", type=int, default=None)
    p.set_defaults(func=_cmd_pipeline)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv=None) -> int:
    try:
        return run(argv)
    except CorrsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
