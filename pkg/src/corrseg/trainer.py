"""Desk-scale two-branch trainer.

A small tanh MLP over per-point geometric features stands in for the
large-scene backbones: shared trunk (d -> h -> h), a classifier head
(h -> C), and a projection head (h -> e) feeding the prototype and
contrastive objectives. One instance is trained on grid-sampled whole scenes
(the global branch), another on sphere crops (the local branch); both share
the combined objective from the losses module.

Optimization is plain gradient descent with decoupled weight decay on the
weight matrices and a cosine-decayed learning rate. Per-scene training units
(features + labels) are built once and cached, so an epoch is one pass of
single GD steps over the units in a fixed order. Everything is seeded and
single-threaded by default; the opt-in data-parallel mode shards units
across processes and takes one step per epoch on the mean gradient, which is
not bit-reproducible against the sequential path (float reduction order).
"""

from __future__ import annotations

import concurrent.futures
import json
from dataclasses import dataclass, field

import numpy as np

from corrseg.features import DEFAULT_K_NEIGHBORS, extract_features
from corrseg.losses import (
    LossConfig,
    PrototypeBank,
    cross_entropy,
    focal_loss,
    lovasz_softmax,
    proto_loss,
    softmax,
    supcon_loss,
)
from corrseg.model import CorrsegError, LabeledCloud, ProbabilityField
from corrseg.sampling import (
    DEFAULT_GRID_SIZE,
    DEFAULT_K_LOCAL,
    DEFAULT_N_MAX,
    CropSpec,
    grid_sample,
    lift_predictions,
    random_crop,
    sphere_crop,
    tile_sphere_centers,
)

__all__ = [
    "ModelParams",
    "TrainConfig",
    "TrainResult",
    "init_params",
    "forward",
    "backward",
    "unit_grads",
    "train_branch",
    "fit_units",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

BRANCHES = ("global", "local")
CHECKPOINT_VERSION = 1
WEIGHT_KEYS = ("w1", "w2", "wc", "wp")          # decayed
BIAS_KEYS = ("b1", "b2", "bc", "bp")            # not decayed
PARAM_KEYS = WEIGHT_KEYS + BIAS_KEYS


@dataclass
class ModelParams:
    """All parameter arrays for one branch, plus a trained flag set by fit."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    wp: np.ndarray
    bp: np.ndarray
    branch: str
    trained: bool = False

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}")
        d, h = self.w1.shape
        if self.w2.shape != (h, h) or self.b1.shape != (h,) or self.b2.shape != (h,):
            raise ValueError("trunk dimensions inconsistent")
        if self.wc.shape[0] != h or self.bc.shape != (self.wc.shape[1],):
            raise ValueError("classifier head dimensions inconsistent")
        if self.wp.shape[0] != h or self.bp.shape != (self.wp.shape[1],):
            raise ValueError("projection head dimensions inconsistent")
        for key in PARAM_KEYS:
            if not np.isfinite(getattr(self, key)).all():
                raise ValueError(f"non-finite entries in {key}")

    @property
    def input_dim(self):
        return self.w1.shape[0]

    @property
    def num_classes(self):
        return self.wc.shape[1]

    @property
    def embed_dim(self):
        return self.wp.shape[1]

    def arrays(self) -> dict:
        return {key: getattr(self, key) for key in PARAM_KEYS}

    def copy(self) -> "ModelParams":
        return ModelParams(
            **{key: getattr(self, key).copy() for key in PARAM_KEYS},
            branch=self.branch,
            trained=self.trained,
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0
    hidden: int = 64
    embed: int = 16
    grid_size: float = DEFAULT_GRID_SIZE     # global-branch sampling
    n_max: int = DEFAULT_N_MAX               # global-branch point budget
    k_local: int = DEFAULT_K_LOCAL           # local-branch crop size
    k_neighbors: int = DEFAULT_K_NEIGHBORS
    loss: LossConfig = field(default_factory=LossConfig)
    # None: contrastive terms follow the branch (global yes, local no).
    contrastive: bool | None = None
    supcon_subsample: int = 256
    use_focal: bool = False
    data_parallel: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.data_parallel < 1:
            raise ValueError("data_parallel must be >= 1")

    def contrastive_for(self, branch: str) -> bool:
        if self.contrastive is not None:
            return self.contrastive
        return branch == "global"


@dataclass
class TrainResult:
    params: ModelParams
    prototypes: PrototypeBank
    loss_curve: np.ndarray        # per-epoch mean unit loss
    feature_mean: np.ndarray
    feature_std: np.ndarray
    config: TrainConfig


def init_params(d: int, hidden: int, num_classes: int, embed: int, branch: str, rng) -> ModelParams:
    def w(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    return ModelParams(
        w1=w(d, hidden), b1=np.zeros(hidden),
        w2=w(hidden, hidden), b2=np.zeros(hidden),
        wc=w(hidden, num_classes), bc=np.zeros(num_classes),
        wp=w(hidden, embed), bp=np.zeros(embed),
        branch=branch,
    )


def forward(params: ModelParams, x: np.ndarray):
    """Logits, embeddings, and the activation cache for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise CorrsegError(
            f"feature dim {x.shape[-1] if x.ndim == 2 else '?'} does not match "
            f"model input dim {params.input_dim}"
        )
    a1 = np.tanh(x @ params.w1 + params.b1)
    a2 = np.tanh(a1 @ params.w2 + params.b2)
    logits = a2 @ params.wc + params.bc
    emb = a2 @ params.wp + params.bp
    return logits, emb, (x, a1, a2)


def backward(params: ModelParams, cache, g_logits: np.ndarray, g_emb: np.ndarray) -> dict:
    """Parameter gradients given upstream gradients at both heads."""
    x, a1, a2 = cache
    grads = {
        "wc": a2.T @ g_logits,
        "bc": g_logits.sum(axis=0),
        "wp": a2.T @ g_emb,
        "bp": g_emb.sum(axis=0),
    }
    g_a2 = g_logits @ params.wc.T + g_emb @ params.wp.T
    g_pre2 = g_a2 * (1.0 - a2**2)
    grads["w2"] = a1.T @ g_pre2
    grads["b2"] = g_pre2.sum(axis=0)
    g_a1 = g_pre2 @ params.w2.T
    g_pre1 = g_a1 * (1.0 - a1**2)
    grads["w1"] = x.T @ g_pre1
    grads["b1"] = g_pre1.sum(axis=0)
    return grads


def unit_grads(
    params: ModelParams,
    prototypes: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    cfg: LossConfig,
    contrastive: bool,
    class_weights=None,
    use_focal: bool = False,
    supcon_idx: np.ndarray | None = None,
):
    """Loss and gradients for one training unit.

    supcon_idx restricts the contrastive term to a subsample of rows (the
    full pairwise similarity matrix is quadratic in the unit size); None
    means all rows.
    """
    logits, emb, cache = forward(params, x)
    probs = softmax(logits)
    if use_focal:
        ce, g_logits = focal_loss(probs, y, cfg.focal_gamma, class_weights)
    else:
        ce, g_logits = cross_entropy(probs, y, class_weights)
    lov, g_lov_p = lovasz_softmax(probs, y)
    inner = (g_lov_p * probs).sum(axis=1, keepdims=True)
    g_logits = g_logits + probs * (g_lov_p - inner)

    g_emb = np.zeros_like(emb)
    g_m = np.zeros_like(prototypes)
    loss = ce + lov
    if contrastive:
        if cfg.lambda_proto > 0:
            lp, g_pz, g_pm = proto_loss(emb, y, prototypes, cfg)
            loss += cfg.lambda_proto * lp
            g_emb += cfg.lambda_proto * g_pz
            g_m += cfg.lambda_proto * g_pm
        if cfg.lambda_supcon > 0:
            rows = np.arange(emb.shape[0]) if supcon_idx is None else supcon_idx
            if rows.shape[0] >= 2:
                ls, g_sz = supcon_loss(emb[rows], y[rows], cfg)
                loss += cfg.lambda_supcon * ls
                g_emb[rows] += cfg.lambda_supcon * g_sz

    grads = backward(params, cache, g_logits, g_emb)
    grads["prototypes"] = g_m
    return loss, grads


def _build_units(scenes, branch: str, cfg: TrainConfig):
    """Per-scene (features, labels) units; sampled and featurized once."""
    units = []
    for scene in scenes:
        if scene.labels is None:
            raise CorrsegError(f"scene {scene.scene_id!r} has no labels")
        if branch == "global":
            res = grid_sample(scene, cfg.grid_size)
            sampled = res.sampled
            if len(sampled) > cfg.n_max:
                sampled = random_crop(sampled, CropSpec(n_max=cfg.n_max, seed=cfg.seed))
            feats = extract_features(sampled, k_neighbors=cfg.k_neighbors)
            units.append((feats.feats, sampled.labels.astype(np.int64)))
        else:
            centers = tile_sphere_centers(scene, cfg.k_local)
            for c in centers:
                crop, _ = sphere_crop(scene, c, cfg.k_local)
                feats = extract_features(crop, k_neighbors=cfg.k_neighbors)
                units.append((feats.feats, crop.labels.astype(np.int64)))
    return units


def _standardize_stats(units):
    allx = np.vstack([x for x, _ in units])
    mean = allx.mean(axis=0)
    std = allx.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def _shard_grads(args):
    """Worker for the data-parallel mode: summed gradients over a unit shard."""
    param_arrays, branch, proto, shard, loss_cfg_args, contrastive, class_weights, use_focal, sub_idx = args
    params = ModelParams(**param_arrays, branch=branch, trained=False)
    cfg = LossConfig(**loss_cfg_args)
    total = {key: 0.0 for key in PARAM_KEYS}
    total["prototypes"] = 0.0
    loss_sum = 0.0
    for (x, y), rows in zip(shard, sub_idx):
        loss, grads = unit_grads(
            params, proto, x, y, cfg, contrastive, class_weights, use_focal, rows
        )
        loss_sum += loss
        for key, g in grads.items():
            total[key] = total[key] + g
    return loss_sum, total


def _loss_cfg_args(cfg: LossConfig) -> dict:
    return {
        "lambda_proto": cfg.lambda_proto,
        "lambda_supcon": cfg.lambda_supcon,
        "tau": cfg.tau,
        "rare_weight": cfg.rare_weight,
        "focal_gamma": cfg.focal_gamma,
        "rare_set": cfg.rare_set,
    }


def fit_units(
    units,
    num_classes: int,
    branch: str,
    cfg: TrainConfig,
    class_weights=None,
) -> TrainResult:
    """Train on prebuilt (features, labels) units. Deterministic in cfg.seed."""
    if not units:
        raise CorrsegError("no training units")
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    for x, y in units:
        if y.min() < 0 or y.max() >= num_classes:
            raise CorrsegError("unit labels outside the class range")

    mean, std = _standardize_stats(units)
    units = [((x - mean) / std, y) for x, y in units]
    d = units[0][0].shape[1]
    rng = np.random.default_rng(cfg.seed)
    params = init_params(d, cfg.hidden, num_classes, cfg.embed, branch, rng)
    bank = PrototypeBank.initialize(num_classes, cfg.embed, rng)
    contrastive = cfg.contrastive_for(branch)
    sub_rng = np.random.default_rng(cfg.seed + 1)

    curve = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        lr_t = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        sub_idx = []
        for x, _ in units:
            n = x.shape[0]
            if contrastive and cfg.loss.lambda_supcon > 0 and n > cfg.supcon_subsample:
                sub_idx.append(np.sort(sub_rng.choice(n, cfg.supcon_subsample, replace=False)))
            else:
                sub_idx.append(None)

        if cfg.data_parallel > 1:
            epoch_loss = _parallel_epoch(
                params, bank, units, sub_idx, cfg, contrastive, class_weights, lr_t
            )
        else:
            epoch_loss = 0.0
            for (x, y), rows in zip(units, sub_idx):
                loss, grads = unit_grads(
                    params, bank.prototypes, x, y, cfg.loss,
                    contrastive, class_weights, cfg.use_focal, rows,
                )
                if not np.isfinite(loss):
                    raise CorrsegError(
                        f"non-finite loss at epoch {epoch} (branch {branch}); "
                        "try a lower learning rate"
                    )
                epoch_loss += loss
                _apply_step(params, bank, grads, lr_t, cfg.weight_decay)
        curve[epoch] = epoch_loss / len(units)

    params.trained = True
    return TrainResult(
        params=params,
        prototypes=bank,
        loss_curve=curve,
        feature_mean=mean,
        feature_std=std,
        config=cfg,
    )


def _apply_step(params: ModelParams, bank: PrototypeBank, grads: dict, lr: float, wd: float):
    for key in WEIGHT_KEYS:
        w = getattr(params, key)
        w -= lr * grads[key] + lr * wd * w
    for key in BIAS_KEYS:
        b = getattr(params, key)
        b -= lr * grads[key]
    bank.prototypes -= lr * grads["prototypes"]


def _parallel_epoch(params, bank, units, sub_idx, cfg, contrastive, class_weights, lr_t):
    """One mean-gradient step over process-sharded units; see module docs."""
    shards = [[] for _ in range(cfg.data_parallel)]
    shard_sub = [[] for _ in range(cfg.data_parallel)]
    for i, (unit, rows) in enumerate(zip(units, sub_idx)):
        shards[i % cfg.data_parallel].append(unit)
        shard_sub[i % cfg.data_parallel].append(rows)
    jobs = [
        (
            {k: v.copy() for k, v in params.arrays().items()},
            params.branch,
            bank.prototypes.copy(),
            shard,
            _loss_cfg_args(cfg.loss),
            contrastive,
            class_weights,
            cfg.use_focal,
            sub,
        )
        for shard, sub in zip(shards, shard_sub)
        if shard
    ]
    loss_sum = 0.0
    total = None
    with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.data_parallel) as pool:
        for shard_loss, shard_grads in pool.map(_shard_grads, jobs):
            loss_sum += shard_loss
            if total is None:
                total = shard_grads
            else:
                for key in shard_grads:
                    total[key] = total[key] + shard_grads[key]
    if not np.isfinite(loss_sum):
        raise CorrsegError("non-finite loss in data-parallel epoch")
    n = len(units)
    mean_grads = {key: g / n for key, g in total.items()}
    _apply_step(params, bank, mean_grads, lr_t, cfg.weight_decay)
    return loss_sum


def train_branch(scenes, branch: str, cfg: TrainConfig, num_classes: int, class_weights=None) -> TrainResult:
    """Build per-scene units for the branch's sampling regime and fit."""
    if not scenes:
        raise CorrsegError("no training scenes")
    units = _build_units(scenes, branch, cfg)
    return fit_units(units, num_classes, branch, cfg, class_weights)


def predict(result: TrainResult, cloud: LabeledCloud) -> ProbabilityField:
    """Full-resolution probability field for one scene.

    Global branch: grid-sample, classify representatives, lift rows back
    through the inverse map. Local branch: classify every tiled sphere crop
    and average the rows of points covered by more than one crop.
    """
    params = result.params
    if not params.trained:
        raise CorrsegError("model parameters are untrained")
    cfg = result.config
    if params.branch == "global":
        res = grid_sample(cloud, cfg.grid_size)
        feats = extract_features(res.sampled, k_neighbors=cfg.k_neighbors)
        x = (feats.feats - result.feature_mean) / result.feature_std
        logits, _, _ = forward(params, x)
        sampled_field = ProbabilityField(probs=softmax(logits), source="global")
        return lift_predictions(sampled_field, res.inverse)

    n = len(cloud)
    acc = np.zeros((n, params.num_classes))
    cover = np.zeros(n)
    for center in tile_sphere_centers(cloud, cfg.k_local):
        crop, idx = sphere_crop(cloud, center, cfg.k_local)
        feats = extract_features(crop, k_neighbors=cfg.k_neighbors)
        x = (feats.feats - result.feature_mean) / result.feature_std
        logits, _, _ = forward(params, x)
        acc[idx] += softmax(logits)
        cover[idx] += 1.0
    if (cover == 0).any():
        raise CorrsegError("tiling left points uncovered")  # repair loop should prevent this
    probs = acc / cover[:, None]
    return ProbabilityField(probs=probs, source="local")


def save_checkpoint(path, result: TrainResult, taxonomy_hash: int = 0) -> None:
    """Versioned npz with parameters, prototypes, feature stats, and config."""
    cfg = result.config
    cfg_json = json.dumps(
        {
            "epochs": cfg.epochs,
            "lr": cfg.lr,
            "weight_decay": cfg.weight_decay,
            "seed": cfg.seed,
            "hidden": cfg.hidden,
            "embed": cfg.embed,
            "grid_size": cfg.grid_size,
            "n_max": cfg.n_max,
            "k_local": cfg.k_local,
            "k_neighbors": cfg.k_neighbors,
            "contrastive": cfg.contrastive,
            "supcon_subsample": cfg.supcon_subsample,
            "use_focal": cfg.use_focal,
            "loss": _loss_cfg_args_jsonable(cfg.loss),
        },
        sort_keys=True,
    )
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_VERSION),
        branch=np.str_(result.params.branch),
        taxonomy_hash=np.uint64(taxonomy_hash),
        prototypes=result.prototypes.prototypes,
        feature_mean=result.feature_mean,
        feature_std=result.feature_std,
        loss_curve=result.loss_curve,
        config_json=np.str_(cfg_json),
        **result.params.arrays(),
    )


def _loss_cfg_args_jsonable(cfg: LossConfig) -> dict:
    args = _loss_cfg_args(cfg)
    args["rare_set"] = sorted(args["rare_set"])
    return args


def load_checkpoint(path) -> tuple:
    """(TrainResult, taxonomy_hash). Rejects unknown format versions."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise CorrsegError(f"unsupported checkpoint format version {version}")
        raw = json.loads(str(z["config_json"]))
        loss_args = raw.pop("loss")
        loss_args["rare_set"] = frozenset(loss_args["rare_set"])
        cfg = TrainConfig(loss=LossConfig(**loss_args), **raw)
        params = ModelParams(
            **{key: z[key] for key in PARAM_KEYS},
            branch=str(z["branch"]),
            trained=True,
        )
        result = TrainResult(
            params=params,
            prototypes=PrototypeBank(prototypes=z["prototypes"]),
            loss_curve=z["loss_curve"],
            feature_mean=z["feature_mean"],
            feature_std=z["feature_std"],
            config=cfg,
        )
        return result, int(z["taxonomy_hash"])
