"""Synthetic scenes and fabricated pair predictions with known ground truth.

Cameras sit on a jittered ring looking at a smooth random height field. Every
pixel ray is intersected with the surface, so ground-truth point maps are exact
and mutually consistent across views. Predictions are derived from the ground
truth with heteroscedastic multiplicative depth noise, displaced outliers and a
confidence model that maps each pixel's true noise level to a confidence.

All randomness is drawn from Philox streams keyed by ``(seed, purpose, ids...)``
so results do not depend on generation order.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .geometry import PoseSE3, camera_rays, look_at
from .pairwise import PairPrediction

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1

# stream purposes
_SURFACE, _CAMERAS, _NOISE, _OUTLIER, _SCALE, _SAMPLES = range(6)


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``."""
    entropy = [int(seed) & _MASK64] + [int(k) & _MASK64 for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass
class SceneConfig:
    num_views: int = 5
    width: int = 32
    height: int = 24
    focal_range: tuple[float, float] = (26.0, 34.0)
    num_surface_points: int = 4000
    scene_extent: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if int(self.num_views) < 2:
            raise InvalidInputError("num_views must be at least 2")
        if int(self.width) < 8 or int(self.height) < 6:
            raise InvalidInputError("resolution must be at least 8x6")
        lo, hi = self.focal_range
        if not (0 < lo <= hi):
            raise InvalidInputError(f"invalid focal_range {self.focal_range}")
        if not self.scene_extent > 0:
            raise InvalidInputError("scene_extent must be positive")
        if int(self.num_surface_points) < 1:
            raise InvalidInputError("num_surface_points must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown scene config keys: {sorted(unknown)}")
        d = dict(d)
        if "focal_range" in d:
            d["focal_range"] = tuple(float(x) for x in d["focal_range"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["focal_range"] = list(self.focal_range)
        return d


def default_conf_model(noise_scale: np.ndarray) -> np.ndarray:
    """``C = 1 + 1 / (s + 0.1)`` clamped to ``[0.1, 10]``; ``s`` is the depth noise in percent."""
    return np.clip(1.0 + 1.0 / (noise_scale + 0.1), 0.1, 10.0)


CONF_MODELS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"default": default_conf_model}


@dataclass
class NoiseModel:
    """Corruption applied to ground truth when fabricating predictions.

    ``depth_noise_rel`` is the typical relative depth noise; each pixel draws its own
    level ``depth_noise_rel * m`` with ``log m ~ N(0, noise_spread)``. The confidence
    model receives that level in percent.
    """

    depth_noise_rel: float = 0.0
    outlier_fraction: float = 0.0
    outlier_magnitude_rel: float = 0.1
    overconfident: bool = True
    conf_model: str = "default"
    noise_spread: float = 0.5
    pair_scale_jitter: float = 0.0

    def validate(self) -> None:
        if not self.depth_noise_rel >= 0:
            raise InvalidInputError("depth_noise_rel must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise InvalidInputError("outlier_fraction must lie in [0, 1)")
        if not self.outlier_magnitude_rel >= 0:
            raise InvalidInputError("outlier_magnitude_rel must be non-negative")
        if not self.noise_spread >= 0 or not self.pair_scale_jitter >= 0:
            raise InvalidInputError("noise_spread and pair_scale_jitter must be non-negative")
        if self.conf_model not in CONF_MODELS:
            raise InvalidInputError(f"unknown conf_model {self.conf_model!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown noise model keys: {sorted(unknown)}")
        model = cls(**d)
        model.validate()
        return model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeightField:
    """``z = base + sum_k a_k sin(2 pi (fx_k x + fy_k y) / extent + phase_k)``."""

    base: float
    extent: float
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    freqs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    phases: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __call__(self, x, y):
        z = np.full(np.broadcast(x, y).shape, self.base)
        for a, (fx, fy), ph in zip(self.amplitudes, self.freqs, self.phases):
            z = z + a * np.sin(2.0 * np.pi * (fx * x + fy * y) / self.extent + ph)
        return z

    @property
    def max_deviation(self) -> float:
        return float(np.abs(self.amplitudes).sum())


@dataclass
class SyntheticScene:
    config: SceneConfig
    surface: HeightField
    gt_poses: list[PoseSE3]
    gt_focals: np.ndarray
    gt_depths: np.ndarray  # (N, H, W)
    gt_points: np.ndarray  # (N, H, W, 3), each view in its own camera frame
    gt_pair_points: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    surface_points: np.ndarray  # (M, 3) world-frame samples of the visible surface
    fallback_surface: bool = False

    @property
    def num_views(self) -> int:
        return self.config.num_views

    def world_points(self, v: int) -> np.ndarray:
        return self.gt_poses[v].apply(self.gt_points[v])


def _random_surface(cfg: SceneConfig) -> HeightField:
    rng = keyed_rng(cfg.seed, _SURFACE)
    n = int(rng.integers(4, 9))
    ext = cfg.scene_extent
    amps = rng.uniform(0.2, 1.0, n)
    amps *= 0.08 * ext / amps.sum()
    freqs = rng.uniform(-1.5, 1.5, (n, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    return HeightField(base=ext, extent=ext, amplitudes=amps, freqs=freqs, phases=phases)


def _ray_cast(surface: HeightField, origin, dirs, samples: int = 96, bisect_iters: int = 80):
    """First intersection parameter ``t`` of rays ``origin + t * dirs`` with the surface.

    Returns NaN for rays that do not cross the surface's height band.
    """
    dirs = np.asarray(dirs, dtype=float)
    shape = dirs.shape[:-1]
    d = dirs.reshape(-1, 3)
    o = np.broadcast_to(np.asarray(origin, dtype=float), d.shape)
    band = surface.max_deviation + 1e-3 * surface.extent
    dz = d[:, 2]
    ok = dz > 1e-9
    safe = np.where(ok, dz, 1.0)
    t_lo = np.maximum((surface.base - band - o[:, 2]) / safe, 0.0)
    t_hi = (surface.base + band - o[:, 2]) / safe
    ok &= t_hi > t_lo

    def g(t):
        p = o + t[:, None] * d
        return p[:, 2] - surface(p[:, 0], p[:, 1])

    ts = t_lo[:, None] + (t_hi - t_lo)[:, None] * np.linspace(0.0, 1.0, samples)[None, :]
    vals = np.stack([g(ts[:, k]) for k in range(samples)], axis=1)
    crossing = (vals[:, :-1] < 0) & (vals[:, 1:] >= 0)
    has = crossing.any(axis=1) & ok
    k = np.argmax(crossing, axis=1)
    idx = np.arange(len(d))
    lo = ts[idx, k].copy()
    hi = ts[idx, np.minimum(k + 1, samples - 1)].copy()
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        below = g(mid) < 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    t[~has] = np.nan
    return t.reshape(shape)


def _place_cameras(cfg: SceneConfig) -> list[PoseSE3]:
    rng = keyed_rng(cfg.seed, _CAMERAS)
    ext = cfg.scene_extent
    poses = []
    for v in range(cfg.num_views):
        ang = 2.0 * np.pi * v / cfg.num_views + rng.uniform(-0.3, 0.3) * np.pi / cfg.num_views
        radius = 0.35 * ext * rng.uniform(0.85, 1.15)
        eye = np.array([radius * np.cos(ang), radius * np.sin(ang), rng.uniform(-0.05, 0.05) * ext])
        target = np.array([0.0, 0.0, ext]) + rng.uniform(-0.05, 0.05, 3) * ext
        poses.append(look_at(eye, target))
    return poses


def _cast_views(surface, poses, focals, cfg):
    depths = []
    for pose, f in zip(poses, focals):
        rays = camera_rays(f, cfg.width, cfg.height)
        t = _ray_cast(surface, pose.translation, rays @ pose.rotation.T)
        depths.append(t)
    return np.stack(depths)


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Build a deterministic scene for ``config``.

    If some pixel ray misses the random surface, the surface is replaced by the
    plane at its mean height (``z = scene_extent``) and the rays are cast again.
    """
    config.validate()
    cfg = config
    surface = _random_surface(cfg)
    poses = _place_cameras(cfg)
    rng = keyed_rng(cfg.seed, _CAMERAS, 1)
    focals = rng.uniform(cfg.focal_range[0], cfg.focal_range[1], cfg.num_views)

    fallback = False
    depths = _cast_views(surface, poses, focals, cfg)
    if not np.all(np.isfinite(depths) & (depths > 0)):
        logger.warning("surface leaves pixels uncovered; falling back to a plane at mean depth")
        fallback = True
        surface = HeightField(base=cfg.scene_extent, extent=cfg.scene_extent)
        depths = _cast_views(surface, poses, focals, cfg)
        if not np.all(np.isfinite(depths) & (depths > 0)):
            raise InvalidInputError("camera configuration does not see the fallback plane")

    points = np.stack([d[..., None] * camera_rays(f, cfg.width, cfg.height) for d, f in zip(depths, focals)])
    world = [p.apply(x) for p, x in zip(poses, points)]
    pair_points = {}
    for i in range(cfg.num_views):
        to_i = poses[i].inverse()
        for j in range(cfg.num_views):
            if i != j:
                pair_points[(i, j)] = (to_i.apply(world[i]), to_i.apply(world[j]))

    # pixel hits plus random sub-pixel samples of the visible surface
    surface_points = np.concatenate([np.concatenate([w.reshape(-1, 3) for w in world]), _sample_surface(surface, poses, focals, cfg)])
    return SyntheticScene(
        config=cfg,
        surface=surface,
        gt_poses=poses,
        gt_focals=np.asarray(focals, dtype=float),
        gt_depths=depths,
        gt_points=points,
        gt_pair_points=pair_points,
        surface_points=surface_points,
        fallback_surface=fallback,
    )


def _sample_surface(surface, poses, focals, cfg):
    """Surface samples seen by the cameras, drawn at random sub-pixel positions."""
    rng = keyed_rng(cfg.seed, _SAMPLES)
    m = int(cfg.num_surface_points)
    views = rng.integers(0, cfg.num_views, m)
    u = rng.uniform(-0.5, cfg.width - 0.5, m) - cfg.width / 2.0
    v = rng.uniform(-0.5, cfg.height - 0.5, m) - cfg.height / 2.0
    out = np.empty((m, 3))
    for k in range(cfg.num_views):
        sel = views == k
        rays = np.stack([u[sel] / focals[k], v[sel] / focals[k], np.ones(sel.sum())], axis=1)
        dirs = rays @ poses[k].rotation.T
        t = _ray_cast(surface, poses[k].translation, dirs)
        out[sel] = poses[k].translation + t[:, None] * dirs
    return out[np.all(np.isfinite(out), axis=1)]


def _random_unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def render_pair_predictions(scene: SyntheticScene, noise: NoiseModel, seed: int, *, return_outlier_masks=False):
    """Fabricate one :class:`PairPrediction` per ordered view pair.

    For view ``v`` of pair ``(i, j)`` every pixel gets a noise level
    ``s = depth_noise_rel * m`` and its point is scaled about camera ``v``'s centre
    by ``exp(N(0, s))``. Exactly ``floor(outlier_fraction * H * W)`` pixels of each
    point map are replaced by the ground-truth point displaced by
    ``outlier_magnitude_rel * scene_extent`` in a uniformly random direction.
    Confidence comes from the configured model; overconfident outliers instead draw
    theirs from the top decile of the map's clean confidences.

    Returns
    -------
    list of PairPrediction sorted by ``(src, tgt)``; with ``return_outlier_masks``
    also a dict mapping ``(i, j)`` to a ``(2, H, W)`` boolean array.
    """
    noise.validate()
    cfg = scene.config
    h, w = cfg.height, cfg.width
    n_out = int(np.floor(noise.outlier_fraction * h * w))
    conf_model = CONF_MODELS[noise.conf_model]
    magnitude = noise.outlier_magnitude_rel * cfg.scene_extent

    preds, masks = [], {}
    for (i, j), gt_maps in sorted(scene.gt_pair_points.items()):
        to_i = scene.gt_poses[i].inverse()
        scale = 1.0
        if noise.pair_scale_jitter > 0:
            scale = float(np.exp(keyed_rng(seed, _SCALE, i, j).normal(0.0, noise.pair_scale_jitter)))
        out_pts, out_conf, out_mask = [], [], []
        for slot, v in enumerate((i, j)):
            gt = gt_maps[slot]
            centre = to_i.apply(scene.gt_poses[v].translation)
            rng = keyed_rng(seed, _NOISE, i, j, slot)
            level = noise.depth_noise_rel * np.exp(rng.normal(0.0, noise.noise_spread, (h, w)))
            if noise.depth_noise_rel > 0:
                factor = np.exp(level * rng.normal(size=(h, w)))
                pts = centre + factor[..., None] * (gt - centre)
            else:
                pts = gt.copy()
            conf = conf_model(100.0 * level)

            mask = np.zeros(h * w, dtype=bool)
            if n_out > 0:
                orng = keyed_rng(seed, _OUTLIER, i, j, slot)
                idx = orng.choice(h * w, size=n_out, replace=False)
                mask[idx] = True
                flat_pts = pts.reshape(-1, 3)
                flat_pts[idx] = gt.reshape(-1, 3)[idx] + magnitude * _random_unit_vectors(orng, n_out)
                flat_conf = conf.reshape(-1)
                clean = flat_conf[~mask]
                if noise.overconfident:
                    top = np.sort(clean)[int(np.floor(0.9 * len(clean))):]
                    flat_conf[idx] = orng.choice(top, size=n_out)
                else:
                    depth_v = np.linalg.norm(gt.reshape(-1, 3)[idx] - centre, axis=1)
                    flat_conf[idx] = conf_model(100.0 * magnitude / depth_v)
            out_pts.append(scale * pts)
            out_conf.append(conf)
            out_mask.append(mask.reshape(h, w))
        preds.append(PairPrediction(i, j, out_pts[0], out_pts[1], out_conf[0], out_conf[1]))
        masks[(i, j)] = np.stack(out_mask)
    return (preds, masks) if return_outlier_masks else preds
