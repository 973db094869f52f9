"""Dual-branch probability fusion and validation-split alpha selection.

The fused row is the convex combination alpha * local + (1 - alpha) * global,
so rows stay normalized without renormalization. Alpha is selected by an
exhaustive sweep of a candidate grid against mIoU on labeled validation
fields, ties to the smaller alpha.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from corrseg.evalstats import mean_iou
from corrseg.model import (
    CorrsegError,
    Prediction,
    ProbabilityField,
    Taxonomy,
    argmax_labels,
)

__all__ = ["FusionConfig", "DEFAULT_ALPHA_GRID", "fuse", "preliminary_labels", "tune_alpha", "alpha_curve_tsv"]

# 0.00, 0.02, ..., 1.00; exact endpoints.
DEFAULT_ALPHA_GRID = tuple(np.round(np.linspace(0.0, 1.0, 51), 2))


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.5
    grid: tuple = DEFAULT_ALPHA_GRID

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if len(self.grid) == 0:
            raise ValueError("alpha grid must be nonempty")
        for a in self.grid:
            if not 0.0 <= a <= 1.0:
                raise ValueError("alpha grid values must lie in [0, 1]")


def fuse(local: ProbabilityField, global_: ProbabilityField, alpha: float) -> ProbabilityField:
    """Row-wise convex combination of the two branch fields, tagged fused."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if local.probs.shape != global_.probs.shape:
        raise CorrsegError(
            f"branch field shapes differ: {local.probs.shape} vs {global_.probs.shape}"
        )
    probs = alpha * local.probs + (1.0 - alpha) * global_.probs
    return ProbabilityField(probs=probs, source="fused")


def preliminary_labels(fused: ProbabilityField) -> Prediction:
    """Argmax labels of a fused field (provenance fused-preliminary)."""
    if fused.source != "fused":
        raise CorrsegError("preliminary labels require a fused field")
    return argmax_labels(fused)


def tune_alpha(
    local: ProbabilityField,
    global_: ProbabilityField,
    gt_labels: np.ndarray,
    tax: Taxonomy,
    grid=None,
) -> tuple:
    """Sweep the candidate grid and pick the mIoU-best alpha (ties -> smaller).

    Returns (best_alpha, curve) where curve is a list of (alpha, miou) over
    the full grid, for reporting.
    """
    if grid is None:
        grid = DEFAULT_ALPHA_GRID
    if len(grid) == 0:
        raise CorrsegError("empty alpha grid")
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    curve = []
    best_alpha, best_miou = None, -1.0
    for alpha in grid:
        pred = preliminary_labels(fuse(local, global_, float(alpha)))
        miou = mean_iou(pred.labels, gt_labels, tax)
        curve.append((float(alpha), miou))
        if miou > best_miou:  # strict: earlier (smaller) alpha wins ties
            best_alpha, best_miou = float(alpha), miou
    return best_alpha, curve


def alpha_curve_tsv(curve) -> str:
    lines = ["alpha\tmiou"]
    for alpha, miou in curve:
        lines.append(f"{alpha:.2f}\t{miou:.6f}")
    return "\n".join(lines) + "\n"
