"""Training objectives with analytic gradients: cross-entropy, focal
reweighting, Lovasz-Softmax, weighted prototypical loss, and weighted
supervised contrastive loss.

Gradient conventions: cross_entropy and focal_loss take softmax
probabilities and return the gradient with respect to the logits that
produced them; lovasz_softmax returns the gradient with respect to the
probabilities (total_loss chains it through the softmax Jacobian). All batch
losses are means over samples, so gradients carry the 1/N factor. Softmaxes
use log-sum-exp and probabilities are clamped at 1e-12 before any log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from corrseg.model import DEFAULT_RARE_SET

__all__ = [
    "LossConfig",
    "PrototypeBank",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "focal_loss",
    "lovasz_softmax",
    "proto_loss",
    "supcon_loss",
    "total_loss",
]

CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_proto: float = 0.1
    lambda_supcon: float = 0.5
    tau: float = 0.1
    rare_weight: float = 5.0
    focal_gamma: float = 2.0
    rare_set: frozenset = DEFAULT_RARE_SET

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_proto < 0 or self.lambda_supcon < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.rare_weight < 1:
            raise ValueError("rare_weight must be >= 1")

    def sample_weights(self, labels: np.ndarray) -> np.ndarray:
        labels = np.atleast_1d(labels)
        w = np.ones(labels.shape[0])
        if self.rare_set:
            rare = np.isin(labels, list(self.rare_set))
            w[rare] = self.rare_weight
        return w


@dataclass
class PrototypeBank:
    """Learnable per-class prototype tokens acting as explicit class centers."""

    prototypes: np.ndarray  # C x e

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise ValueError("prototypes must be a C x e matrix")
        if not np.isfinite(self.prototypes).all():
            raise ValueError("prototypes must be finite")

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def embedding_dim(self):
        return self.prototypes.shape[1]

    @classmethod
    def initialize(cls, num_classes: int, embedding_dim: int, rng) -> "PrototypeBank":
        # Near-zero start: with a sharp temperature the softmax over token
        # similarities saturates once tokens reach unit scale, so directions
        # must be set by the early (uniform-assignment) gradients for the
        # tokens to land on their class centers.
        return cls(prototypes=rng.normal(0.0, 0.01, size=(num_classes, embedding_dim)))


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    squeeze = probs.ndim == 1
    if squeeze:
        probs = probs[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != probs.shape[0]:
        raise ValueError("labels length must match the number of rows")
    return probs, labels, squeeze


def _row_weights(labels, class_weights):
    if class_weights is None:
        return np.ones(labels.shape[0])
    return np.asarray(class_weights, dtype=np.float64)[labels]


def cross_entropy(probs, labels, class_weights=None):
    """Mean weighted negative log-likelihood; gradient w.r.t. the logits."""
    probs, labels, squeeze = _as_batch(probs, labels)
    n, _ = probs.shape
    w = _row_weights(labels, class_weights)
    p_y = np.clip(probs[np.arange(n), labels], CLAMP, None)
    loss = float(np.mean(-w * np.log(p_y)))
    grad = probs * w[:, None]
    grad[np.arange(n), labels] -= w
    grad /= n
    return loss, (grad[0] if squeeze else grad)


def focal_loss(probs, labels, gamma: float = 2.0, class_weights=None):
    """Focal modulation (1-p_y)^gamma of cross-entropy; gamma = 0 is exactly CE."""
    if gamma == 0:
        return cross_entropy(probs, labels, class_weights)
    probs, labels, squeeze = _as_batch(probs, labels)
    n, _ = probs.shape
    w = _row_weights(labels, class_weights)
    rows = np.arange(n)
    p_y = probs[rows, labels]
    p_safe = np.clip(p_y, CLAMP, None)
    one_minus = np.clip(1.0 - p_y, 0.0, None)
    loss = float(np.mean(-w * one_minus**gamma * np.log(p_safe)))
    # dL/dp_y, then through the softmax Jacobian row for class y.
    dldp = w * (gamma * one_minus ** (gamma - 1.0) * np.log(p_safe) - one_minus**gamma / p_safe)
    grad = dldp[:, None] * p_y[:, None] * (-probs)
    grad[rows, labels] += dldp * p_y * 1.0
    grad /= n
    return loss, (grad[0] if squeeze else grad)


def _lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    grad = jaccard.copy()
    grad[1:] -= jaccard[:-1]
    return grad


def lovasz_softmax(probs, labels):
    """Lovasz extension of the Jaccard loss, averaged over classes present in
    the labels; gradient w.r.t. the probabilities.

    Ties in the error sort take the stable (index) order, a valid subgradient
    choice.
    """
    probs, labels, _ = _as_batch(probs, labels)
    n, _ = probs.shape
    present = np.unique(labels)
    grad = np.zeros_like(probs)
    losses = []
    for c in present:
        fg = (labels == c).astype(np.float64)
        p_c = probs[:, c]
        errors = np.where(fg > 0, 1.0 - p_c, p_c)
        order = np.argsort(-errors, kind="stable")
        g = _lovasz_grad(fg[order])
        losses.append(float(errors[order] @ g))
        sign = np.where(fg > 0, -1.0, 1.0)
        grad[order, c] = sign[order] * g
    loss = float(np.mean(losses))
    grad /= len(present)
    return loss, grad


def proto_loss(embeddings, labels, prototypes, cfg: LossConfig):
    """Weighted prototype attraction: -w_y log softmax_c(z . m_c / tau) at c=y,
    averaged over the batch. Gradients w.r.t. embeddings and all prototypes.
    """
    Z = np.asarray(embeddings, dtype=np.float64)
    squeeze = Z.ndim == 1
    if squeeze:
        Z = Z[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    M = np.asarray(prototypes.prototypes if isinstance(prototypes, PrototypeBank) else prototypes)
    b = Z.shape[0]
    w = cfg.sample_weights(labels)
    logits = Z @ M.T / cfg.tau
    lsm = log_softmax(logits)
    loss = float(np.mean(-w * lsm[np.arange(b), labels]))
    q = np.exp(lsm)
    delta = q.copy()
    delta[np.arange(b), labels] -= 1.0
    delta *= w[:, None] / (cfg.tau * b)
    grad_z = delta @ M
    grad_m = delta.T @ Z
    return loss, (grad_z[0] if squeeze else grad_z), grad_m


def supcon_loss(embeddings, labels, cfg: LossConfig):
    """Weighted supervised contrastive loss on L2-normalized embeddings.

    Anchors with no same-class positive contribute zero. Gradient w.r.t. the
    raw (pre-normalization) embeddings.
    """
    Z = np.asarray(embeddings, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("supcon needs a batch of at least 2 embeddings")
    labels = np.asarray(labels, dtype=np.int64)
    b = Z.shape[0]
    w = cfg.sample_weights(labels)
    norms = np.linalg.norm(Z, axis=1)
    safe = np.clip(norms, CLAMP, None)
    zn = Z / safe[:, None]
    sim = zn @ zn.T / cfg.tau

    same = labels[:, None] == labels[None, :]
    eye = np.eye(b, dtype=bool)
    pos = same & ~eye
    n_pos = pos.sum(axis=1)

    neg_inf = -np.inf * np.ones_like(sim)
    logits = np.where(eye, neg_inf, sim)
    row_max = np.max(np.where(eye, -np.inf, sim), axis=1)
    exp = np.exp(logits - row_max[:, None])
    exp[eye] = 0.0
    denom = exp.sum(axis=1)
    lse = row_max + np.log(denom)

    active = n_pos > 0
    loss_rows = np.zeros(b)
    if active.any():
        mean_pos_sim = np.where(active, (sim * pos).sum(axis=1) / np.maximum(n_pos, 1), 0.0)
        loss_rows = np.where(active, -(mean_pos_sim - lse), 0.0)
    loss = float(np.mean(w * loss_rows))

    # dL/dsim, rows for inactive anchors are zero.
    q = exp / np.maximum(denom, CLAMP)[:, None]
    coeff = (w * active)[:, None] / b
    dsim = coeff * (q - pos / np.maximum(n_pos, 1)[:, None])
    dsim[eye] = 0.0
    g_zn = (dsim + dsim.T) @ zn / cfg.tau
    # Through the normalization: project out the radial component.
    radial = (g_zn * zn).sum(axis=1, keepdims=True)
    grad = (g_zn - radial * zn) / safe[:, None]
    return loss, grad


def total_loss(
    logits,
    embeddings,
    labels,
    prototypes,
    cfg: LossConfig,
    class_weights=None,
    use_focal: bool = False,
):
    """Combined objective: CE (or focal) + Lovasz + lambda-weighted prototype
    and contrastive terms. Returns (loss, grads, components) where grads has
    entries for 'logits', 'embeddings', and 'prototypes'; component gradients
    sum exactly into the totals.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    probs = softmax(logits)
    if use_focal:
        ce, g_ce = focal_loss(probs, labels, cfg.focal_gamma, class_weights)
    else:
        ce, g_ce = cross_entropy(probs, labels, class_weights)
    lov, g_lov_p = lovasz_softmax(probs, labels)
    # Chain the probability-space gradient through the softmax Jacobian.
    inner = (g_lov_p * probs).sum(axis=1, keepdims=True)
    g_lov = probs * (g_lov_p - inner)

    components = {"ce": ce, "lovasz": lov, "proto": 0.0, "supcon": 0.0}
    Z = None if embeddings is None else np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    M = prototypes.prototypes if isinstance(prototypes, PrototypeBank) else prototypes
    grad_z = None if Z is None else np.zeros_like(Z)
    grad_m = None if M is None else np.zeros_like(np.asarray(M, dtype=np.float64))

    if cfg.lambda_proto > 0 and Z is not None and M is not None:
        lp, g_pz, g_pm = proto_loss(Z, labels, prototypes, cfg)
        components["proto"] = lp
        grad_z += cfg.lambda_proto * g_pz
        grad_m += cfg.lambda_proto * g_pm
    if cfg.lambda_supcon > 0 and Z is not None and Z.shape[0] >= 2:
        ls, g_sz = supcon_loss(Z, labels, cfg)
        components["supcon"] = ls
        grad_z += cfg.lambda_supcon * g_sz

    loss = ce + lov + cfg.lambda_proto * components["proto"] + cfg.lambda_supcon * components["supcon"]
    grads = {"logits": g_ce + g_lov, "embeddings": grad_z, "prototypes": grad_m}
    return loss, grads, components
