"""Per-pair recovery of focal length and relative similarity from predicted point maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .geometry import PoseSE3, centered_pixel_grid, umeyama

logger = logging.getLogger(__name__)

WEISZFELD_MAX_ITER = 100
WEISZFELD_RTOL = 1e-9
_RESIDUAL_FLOOR = 1e-12


@dataclass(frozen=True)
class PairPrediction:
    """Point and confidence maps predicted for the directed image pair ``(src, tgt)``.

    Both point maps are expressed in the camera frame of ``view_src``:
    ``points_src`` holds the source view's own points and ``points_tgt`` the target
    view's points.
    """

    view_src: int
    view_tgt: int
    points_src: np.ndarray
    points_tgt: np.ndarray
    conf_src: np.ndarray
    conf_tgt: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("points_src", "points_tgt", "conf_src", "conf_tgt"):
            a = np.asarray(getattr(self, name), dtype=float)
            a.setflags(write=False)
            arrays[name] = a
        if arrays["conf_src"].ndim != 2:
            raise InvalidInputError("confidence maps must be H x W")
        h, w = arrays["conf_src"].shape
        for name in ("points_src", "points_tgt"):
            if arrays[name].shape != (h, w, 3):
                raise InvalidInputError(f"{name} has shape {arrays[name].shape}, expected {(h, w, 3)}")
            if not np.all(np.isfinite(arrays[name])):
                raise InvalidInputError(f"{name} contains non-finite values")
        if arrays["conf_tgt"].shape != (h, w):
            raise InvalidInputError("confidence maps differ in shape")
        for name in ("conf_src", "conf_tgt"):
            c = arrays[name]
            if not np.all(np.isfinite(c)) or np.any(c < 0):
                raise InvalidInputError(f"{name} must be finite and non-negative")
        if self.view_src == self.view_tgt:
            raise InvalidInputError("a pair prediction needs two distinct views")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    @property
    def key(self) -> tuple[int, int]:
        return (int(self.view_src), int(self.view_tgt))

    @property
    def shape(self) -> tuple[int, int]:
        return self.conf_src.shape


def focal_objective(f: float, points, conf, width: int, height: int) -> float:
    """Confidence-weighted reprojection distance ``sum_p C_p ||(u', v') - f * X_xy / X_z||``.

    Pixels with non-positive depth are ignored.
    """
    ratios, pix, c = _focal_terms(points, conf, width, height)
    return float(c @ np.linalg.norm(pix - f * ratios, axis=1))


def _focal_terms(points, conf, width, height):
    pts = np.asarray(points, dtype=float)
    c = np.asarray(conf, dtype=float)
    if pts.shape != (height, width, 3) or c.shape != (height, width):
        raise InvalidInputError(f"points {pts.shape} / conf {c.shape} do not match image size {(height, width)}")
    uc, vc = centered_pixel_grid(width, height)
    z = pts[..., 2]
    usable = (c > 0) & (z > 0)
    ratios = pts[usable][:, :2] / z[usable][:, None]
    pix = np.stack([uc[usable], vc[usable]], axis=1)
    return ratios, pix, c[usable]


def estimate_focal(points, conf, width: int, height: int, *, return_history: bool = False):
    """Recover the focal length of a self-view point map by Weiszfeld iterations.

    Solves ``argmin_f sum_p C_p ||(u'_p, v'_p) - f (X_p0, X_p1) / X_p2||`` where each
    step is the weighted least-squares solution with weights ``C_p / r_p``. Starts
    from ``max(W, H)`` and stops once the relative change drops below 1e-9 or after
    100 iterations.

    Parameters
    ----------
    points : (H, W, 3) array
        Point map in the camera frame of the view.
    conf : (H, W) array
    width, height : int
    return_history : bool
        Also return the objective value after each iterate (starting with the
        initial guess).

    Returns
    -------
    float, or (float, list of float) when ``return_history`` is set.
    """
    ratios, pix, c = _focal_terms(points, conf, width, height)
    if len(c) < 2:
        raise DegenerateInputError(f"focal estimation needs at least 2 usable pixels, got {len(c)}")
    a2 = (ratios * ratios).sum(axis=1)
    aq = (ratios * pix).sum(axis=1)
    if not np.any(a2 > 0):
        raise DegenerateInputError("all usable points lie on the optical axis")

    def objective(f):
        return float(c @ np.linalg.norm(pix - f * ratios, axis=1))

    f = float(max(width, height))
    history = [objective(f)]
    for _ in range(WEISZFELD_MAX_ITER):
        r = np.maximum(np.linalg.norm(pix - f * ratios, axis=1), _RESIDUAL_FLOOR)
        k = c / r
        f_new = float((k @ aq) / (k @ a2))
        if not np.isfinite(f_new) or f_new <= 0:
            raise DegenerateInputError("Weiszfeld iteration left the positive half-line")
        history.append(objective(f_new))
        done = abs(f_new - f) / f_new < WEISZFELD_RTOL
        f = f_new
        if done:
            break
    else:
        logger.debug("Weiszfeld focal estimate stopped at the iteration cap (f=%.6g)", f)
    return (f, history) if return_history else f


def estimate_relative_pose(points_a, points_b, conf_a, conf_b):
    """Weighted Procrustes fit ``points_b ≈ scale * (R @ points_a + t)``.

    Per-pixel weights are ``conf_a * conf_b``; zero-weight pixels are ignored.

    Returns
    -------
    (PoseSE3, float)
        The rigid part ``(R, t)`` and the scale.
    """
    a = np.asarray(points_a, dtype=float).reshape(-1, 3)
    b = np.asarray(points_b, dtype=float).reshape(-1, 3)
    w = (np.asarray(conf_a, dtype=float) * np.asarray(conf_b, dtype=float)).reshape(-1)
    if a.shape != b.shape or len(w) != len(a):
        raise InvalidInputError("point maps and confidences must share their shape")
    keep = w > 0
    r, t, s = umeyama(a[keep], b[keep], w[keep])
    if not s > 0:
        raise DegenerateInputError(f"non-positive scale {s} from Procrustes fit")
    return PoseSE3(r, t / s), s
