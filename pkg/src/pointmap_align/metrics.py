"""Evaluation metrics: point error, accuracy/completeness, trajectory and focal error, rank correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, InvalidInputError
from .geometry import PoseSE3, umeyama


@dataclass(frozen=True)
class Trajectory:
    """Camera-to-world poses keyed by view id."""

    ids: tuple[int, ...]
    poses: tuple[PoseSE3, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            raise InvalidInputError("trajectory view ids must be unique")
        if len(ids) != len(self.poses):
            raise InvalidInputError("one pose per view id is required")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_poses(cls, poses) -> "Trajectory":
        poses = list(poses)
        return cls(tuple(range(len(poses))), tuple(poses))

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


def _as_trajectory(t) -> Trajectory:
    return t if isinstance(t, Trajectory) else Trajectory.from_poses(t)


def avg_point_error(pred, gt, pred_mask=None, gt_mask=None) -> float:
    """Mean distance between scale-normalized predicted and ground-truth point maps.

    Both maps are divided by their mean point norm over the common mask, the
    prediction is brought to the ground-truth scale, and distances are averaged
    over that same mask.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise InvalidInputError(f"point maps differ in shape: {pred.shape} vs {gt.shape}")
    both = np.ones(pred.shape[:-1], bool)
    for m in (pred_mask, gt_mask):
        if m is not None:
            both &= np.asarray(m, dtype=bool)
    if not both.any():
        raise DegenerateInputError("prediction and ground-truth masks do not intersect")
    p, g = pred[both], gt[both]
    z_pred = np.linalg.norm(p, axis=-1).mean()
    z_gt = np.linalg.norm(g, axis=-1).mean()
    if not (z_pred > 0 and z_gt > 0):
        raise DegenerateInputError("point map has zero mean norm")
    return float(np.linalg.norm(p * (z_gt / z_pred) - g, axis=-1).mean())


def accuracy_completeness(recon, gt) -> tuple[float, float]:
    """Mean nearest-neighbour distance recon->gt (accuracy) and gt->recon (completeness)."""
    recon = np.asarray(recon, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(recon) == 0 or len(gt) == 0:
        raise DegenerateInputError("accuracy/completeness needs two non-empty point sets")
    acc = cKDTree(gt).query(recon)[0]
    comp = cKDTree(recon).query(gt)[0]
    return float(acc.mean()), float(comp.mean())


def align_trajectory(est, gt):
    """Similarity ``(R, t, s)`` mapping estimated camera positions onto ground truth."""
    est, gt = _as_trajectory(est), _as_trajectory(gt)
    if sorted(est.ids) != sorted(gt.ids):
        raise InvalidInputError("trajectories cover different view ids")
    if len(est.ids) < 3:
        raise DegenerateInputError(f"ATE needs at least 3 poses, got {len(est.ids)}")
    order = {v: k for k, v in enumerate(gt.ids)}
    src = est.positions()
    dst = gt.positions()[[order[v] for v in est.ids]]
    r, t, s = umeyama(src, dst)
    return r, t, s, src, dst


def ate(est, gt) -> float:
    """RMS camera-position error after closed-form similarity alignment.

    Accepts :class:`Trajectory` objects or plain pose sequences (ids ``0..N-1``).
    """
    r, t, s, src, dst = align_trajectory(est, gt)
    aligned = s * src @ r.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - dst) ** 2, axis=1))))


def afe(est_focals, gt_focals) -> float:
    """Mean absolute focal error in percent."""
    est = np.asarray(est_focals, dtype=float).reshape(-1)
    gt = np.asarray(gt_focals, dtype=float).reshape(-1)
    if est.shape != gt.shape:
        raise InvalidInputError(f"focal lists differ in length: {len(est)} vs {len(gt)}")
    if len(gt) == 0 or np.any(gt <= 0):
        raise InvalidInputError("ground-truth focals must be positive")
    return float(np.mean(100.0 * np.abs(est - gt) / gt))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    # tie groups share the mean of the ranks they span
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(x) != len(y):
        raise InvalidInputError("spearman inputs differ in length")
    if len(x) < 3:
        raise InvalidInputError("spearman needs at least 3 samples")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInputError("rank correlation is undefined for constant input")
    rx = _average_ranks(x) - (len(x) + 1) / 2.0
    ry = _average_ranks(y) - (len(y) + 1) / 2.0
    return float(np.clip((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))
