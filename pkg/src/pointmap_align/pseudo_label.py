"""Confidence-thresholded pseudo-labels and the losses a fine-tuner would train with."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .geometry import CameraIntrinsics, back_project
from .graph import GlobalState, Pair, ViewGraph

DEFAULT_CUTOFF = 1.5


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InvalidInputError("alpha must be non-negative")
        if not self.cutoff > 0:
            raise InvalidInputError("cutoff must be positive")


@dataclass
class PseudoLabelSet:
    """Per directed pair ``(i, j)``: labels ``(2, H, W, 3)`` in frame ``i`` for views
    ``(i, j)`` and the matching boolean masks ``(2, H, W)``. Unmasked labels are NaN."""

    labels: dict[Pair, np.ndarray]
    masks: dict[Pair, np.ndarray]
    cutoff: float

    def retained_count(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    def total_count(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def retained_fraction(self) -> float:
        total = self.total_count()
        return self.retained_count() / total if total else 0.0


def world_points(state: GlobalState, view: int) -> np.ndarray:
    """Back-projected depth map of ``view`` in world coordinates, ``(H, W, 3)``."""
    h, w = state.depths.shape[1:]
    intr = CameraIntrinsics(float(state.focals[view]), w, h)
    return back_project(state.depths[view], intr, state.poses[view])


def generate_pseudo_labels(state: GlobalState, weights, graph: ViewGraph, cutoff: float = DEFAULT_CUTOFF) -> PseudoLabelSet:
    """Optimized points re-expressed in each pair's source frame, kept where ``w > cutoff``."""
    cutoff = float(cutoff)
    if not np.isfinite(cutoff):
        raise InvalidInputError("cutoff must be finite")
    world = [world_points(state, v) for v in range(state.num_views)]
    labels, masks = {}, {}
    for key in graph.keys:
        i, j = key
        w = np.asarray(weights[key], dtype=float)
        if w.shape != (2, graph.height, graph.width):
            raise InvalidInputError(f"weights for {key} have shape {w.shape}")
        to_i = state.poses[i].inverse()
        lab = np.stack([to_i.apply(world[i]), to_i.apply(world[j])])
        mask = w > cutoff
        labels[key] = np.where(mask[..., None], lab, np.nan)
        masks[key] = mask
    return PseudoLabelSet(labels, masks, cutoff)


def normalization_factor(points_i, mask_i, points_j, mask_j) -> float:
    """Mean norm of the valid points of both views."""
    total, count = 0.0, 0
    for pts, mask in ((points_i, mask_i), (points_j, mask_j)):
        sel = np.asarray(pts, dtype=float)[np.asarray(mask, dtype=bool)]
        total += float(np.linalg.norm(sel, axis=-1).sum())
        count += len(sel)
    if count == 0:
        raise DegenerateInputError("normalization needs at least one valid point")
    return total / count


def regression_loss(pred, label, mask, z_pred: float, z_label: float) -> np.ndarray:
    """Per-pixel ``|pred / z_pred - label / z_label|``; zero outside ``mask``."""
    if not (z_pred > 0 and z_label > 0):
        raise InvalidInputError("normalization factors must be positive")
    mask = np.asarray(mask, dtype=bool)
    pred = np.asarray(pred, dtype=float)
    label = np.where(mask[..., None], np.asarray(label, dtype=float), 0.0)
    loss = np.linalg.norm(pred / z_pred - label / z_label, axis=-1)
    return np.where(mask, loss, 0.0)


def confidence_aware_loss(losses, conf, mask, alpha: float) -> float:
    """``sum C * l - alpha * log C`` over masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    c = np.asarray(conf, dtype=float)[mask]
    if np.any(c <= 0):
        raise InvalidInputError("confidences must be positive on masked pixels")
    l = np.asarray(losses, dtype=float)[mask]
    return float(np.sum(c * l - alpha * np.log(c)))
