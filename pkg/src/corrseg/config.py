"""Flat key=value configuration for the pipeline.

One file configures every stage. Keys are section-prefixed (sampling.*,
loss.*, train.*, fusion.*, geoverify.*, paths.*) plus a bare `seed`. Lookup
order: an explicit path, then the CORRSEG_CONFIG environment variable, then
the packaged defaults. Referenced taxonomy and constraint files must exist
when the config is loaded; relative paths resolve against the config file's
directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from corrseg.geoverify import ConstraintRegistry, DbscanParams, default_registry
from corrseg.losses import LossConfig
from corrseg.model import CorrsegError, Taxonomy, default_taxonomy
from corrseg.trainer import TrainConfig

__all__ = [
    "ENV_VAR",
    "PipelineConfig",
    "parse_flat_config",
    "config_from_mapping",
    "load_config",
    "default_config_text",
    "packaged_data_text",
]

ENV_VAR = "CORRSEG_CONFIG"

# key -> (type, default). Defaults are the benchmark-scale constants; the
# packaged default.cfg spells out the same values.
_SCHEMA = {
    "seed": (int, 0),
    "sampling.grid_size": (float, 0.25),
    "sampling.n_max": (int, 4_000_000),
    "sampling.k_local": (int, 120_000),
    "sampling.k_neighbors": (int, 16),
    "loss.lambda_proto": (float, 0.1),
    "loss.lambda_supcon": (float, 0.5),
    "loss.tau": (float, 0.1),
    "loss.rare_weight": (float, 5.0),
    "loss.focal_gamma": (float, 2.0),
    "train.epochs": (int, 300),
    "train.lr": (float, 0.01),
    "train.weight_decay": (float, 1e-4),
    "train.hidden": (int, 64),
    "train.embed": (int, 16),
    "train.supcon_subsample": (int, 256),
    "train.data_parallel": (int, 1),
    "fusion.alpha": (float, 0.5),
    "geoverify.eps": (float, 0.5),
    "geoverify.min_samples": (int, 10),
    "geoverify.tau_geo": (float, 0.4),
    "paths.taxonomy": (str, ""),
    "paths.constraints": (str, ""),
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the CLI stages need, already validated."""

    taxonomy: Taxonomy
    registry: ConstraintRegistry
    train: TrainConfig
    alpha: float
    dbscan: DbscanParams
    tau_geo: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("fusion alpha must lie in [0, 1]")
        if self.tau_geo < 0.0:
            raise ValueError("tau_geo must be nonnegative")


def parse_flat_config(text: str) -> dict:
    """key=value lines; # starts a comment; duplicate keys are an error."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorrsegError(f"config line {ln}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise CorrsegError(f"config line {ln}: duplicate key {key!r}")
        out[key] = value
    return out


def packaged_data_text(name: str) -> str:
    return resources.files("corrseg.data").joinpath(name).read_text(encoding="utf-8")


def default_config_text() -> str:
    return packaged_data_text("default.cfg")


def config_from_mapping(mapping: dict, base_dir=None) -> PipelineConfig:
    unknown = sorted(set(mapping) - set(_SCHEMA))
    if unknown:
        raise CorrsegError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (typ, default) in _SCHEMA.items():
        if key in mapping:
            try:
                values[key] = typ(mapping[key])
            except ValueError:
                raise CorrsegError(f"config key {key}: cannot parse {mapping[key]!r} as {typ.__name__}")
        else:
            values[key] = default

    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def read_referenced(key):
        rel = values[key]
        if not rel:
            return None
        path = Path(rel) if Path(rel).is_absolute() else base / rel
        if not path.exists():
            raise CorrsegError(f"config key {key}: file not found: {path}")
        return path.read_text(encoding="utf-8")

    tax_text = read_referenced("paths.taxonomy")
    taxonomy = Taxonomy.from_config_text(tax_text) if tax_text else default_taxonomy()
    reg_text = read_referenced("paths.constraints")
    registry = (
        ConstraintRegistry.from_config_text(reg_text) if reg_text else default_registry()
    )

    loss = LossConfig(
        lambda_proto=values["loss.lambda_proto"],
        lambda_supcon=values["loss.lambda_supcon"],
        tau=values["loss.tau"],
        rare_weight=values["loss.rare_weight"],
        focal_gamma=values["loss.focal_gamma"],
        rare_set=taxonomy.rare_set,
    )
    train = TrainConfig(
        epochs=values["train.epochs"],
        lr=values["train.lr"],
        weight_decay=values["train.weight_decay"],
        seed=values["seed"],
        hidden=values["train.hidden"],
        embed=values["train.embed"],
        grid_size=values["sampling.grid_size"],
        n_max=values["sampling.n_max"],
        k_local=values["sampling.k_local"],
        k_neighbors=values["sampling.k_neighbors"],
        loss=loss,
        supcon_subsample=values["train.supcon_subsample"],
        data_parallel=values["train.data_parallel"],
    )
    dbscan = DbscanParams(
        eps=values["geoverify.eps"], min_samples=values["geoverify.min_samples"]
    )
    return PipelineConfig(
        taxonomy=taxonomy,
        registry=registry,
        train=train,
        alpha=values["fusion.alpha"],
        dbscan=dbscan,
        tau_geo=values["geoverify.tau_geo"],
        seed=values["seed"],
    )


def load_config(path=None, env=None) -> PipelineConfig:
    env = os.environ if env is None else env
    if path is None and env.get(ENV_VAR):
        path = env[ENV_VAR]
    if path is None:
        return config_from_mapping(parse_flat_config(default_config_text()))
    p = Path(path)
    if not p.exists():
        raise CorrsegError(f"config file not found: {p}")
    return config_from_mapping(parse_flat_config(p.read_text(encoding="utf-8")), base_dir=p.parent)
