"""Shared scenario builders and independent oracles used across the test suite."""

from __future__ import annotations

import functools

import numpy as np

from pointmap_align.align import AlignConfig, optimize
from pointmap_align.geometry import PoseSE3, so3_exp
from pointmap_align.graph import build_view_graph, initialize
from pointmap_align.pseudo_label import world_points
from pointmap_align.synth import NoiseModel, SceneConfig, generate_scene, render_pair_predictions

OUTLIER_NOISE = NoiseModel(depth_noise_rel=0.01, outlier_fraction=0.1, overconfident=True)
ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)
NOISE = {"clean": NoiseModel(), "outliers": OUTLIER_NOISE}


def perturb_state(state, rng, extent, deg=2.0, trans_rel=0.01, scale_rel=0.1):
    """Rotate each free pose by ``deg`` degrees about a random axis, shift it by
    ``trans_rel * extent`` in a random direction, and scale each pair by ``1 +/- scale_rel``."""
    out = state.copy()

    def jolt(p):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        return PoseSE3(so3_exp(np.deg2rad(deg) * axis) @ p.rotation, p.translation + trans_rel * extent * d)

    out.poses = [out.poses[0]] + [jolt(p) for p in out.poses[1:]]
    out.edge_poses = {k: jolt(p) for k, p in out.edge_poses.items()}
    out.edge_scales = {k: s * (1.0 + scale_rel * rng.choice([-1.0, 1.0])) for k, s in out.edge_scales.items()}
    return out


@functools.lru_cache(maxsize=None)
def scene_and_graph(seed: int, noise: str = "clean", num_views: int = 5):
    """Cached scene, view graph and outlier masks; ``noise`` names an entry of ``NOISE``."""
    scene = generate_scene(SceneConfig(num_views=num_views, seed=seed))
    preds, masks = render_pair_predictions(scene, NOISE[noise], seed, return_outlier_masks=True)
    graph = build_view_graph(preds, num_views)
    return scene, graph, masks


@functools.lru_cache(maxsize=None)
def aligned(seed: int, noise: str, robust: bool):
    """Initialize and optimize the cached scene with default settings."""
    scene, graph, _ = scene_and_graph(seed, noise)
    state, _ = initialize(graph)
    return optimize(state, graph, AlignConfig(robust=robust))


def state_point_errors(state, scene, graph):
    """Per directed pair, ``(2, H, W)`` distances between optimized points expressed in the
    pair's source frame and ground truth, after scale normalization of each map."""
    out = {}
    for key in graph.keys:
        i, j = key
        to_i = state.poses[i].inverse()
        gt = scene.gt_pair_points[key]
        errs = []
        for idx, v in enumerate((i, j)):
            pts = to_i.apply(world_points(state, v))
            zp = np.linalg.norm(pts, axis=-1).mean()
            zg = np.linalg.norm(gt[idx], axis=-1).mean()
            errs.append(np.linalg.norm(pts * (zg / zp) - gt[idx], axis=-1))
        out[key] = np.stack(errs)
    return out


def raw_prediction_errors(scene, graph):
    """Per directed pair, ``(2, H, W)`` distances between predicted and ground-truth points."""
    return {
        key: np.linalg.norm(np.stack([p.points_src, p.points_tgt]) - np.stack(scene.gt_pair_points[key]), axis=-1)
        for key, p in graph.predictions.items()
    }


def golden_section_min(fn, lo, hi, iters=100):
    """Vectorized golden-section search for a unimodal ``fn`` on ``[lo, hi]``."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    g = (np.sqrt(5.0) - 1.0) / 2.0
    a = hi - g * (hi - lo)
    b = lo + g * (hi - lo)
    fa, fb = fn(a), fn(b)
    for _ in range(iters):
        left = fa < fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
        a_new = hi - g * (hi - lo)
        b_new = lo + g * (hi - lo)
        a, b = a_new, b_new
        fa, fb = fn(a), fn(b)
    return 0.5 * (lo + hi)


def brute_ranks(x):
    x = np.asarray(x, dtype=float)
    less = (x[None, :] < x[:, None]).sum(axis=1)
    equal = (x[None, :] == x[:, None]).sum(axis=1)
    return less + (equal + 1) / 2.0


def brute_spearman(x, y):
    rx, ry = brute_ranks(x), brute_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def random_pose(rng, trans_scale=1.0):
    return PoseSE3(so3_exp(rng.normal(size=3)), trans_scale * rng.normal(size=3))


def gt_state(scene, graph):
    """Ground-truth :class:`GlobalState`: prediction ``(i, j)`` maps to the world through view ``i``'s pose."""
    from pointmap_align.graph import GlobalState

    return GlobalState(
        list(scene.gt_poses),
        scene.gt_focals.copy(),
        scene.gt_depths.copy(),
        {k: scene.gt_poses[k[0]] for k in graph.keys},
        {k: 1.0 for k in graph.keys},
    )


def fd_gradient_errors(seed: int, h: float = 1e-6, mu=0.01):
    """Worst relative error per parameter block between analytic and central-difference
    gradients on a random 2-view 8x6 instance."""
    from pointmap_align.align import Params, Problem, apply_increment, objective_and_gradient, objective_value

    rng = np.random.default_rng(seed)
    scene = generate_scene(SceneConfig(num_views=2, width=8, height=6, seed=seed))
    preds = render_pair_predictions(scene, NoiseModel(depth_noise_rel=0.05, outlier_fraction=0.1), seed)
    graph = build_view_graph(preds, 2)
    state, _ = initialize(graph)
    problem = Problem.from_graph(graph)
    params = Params.from_state(state, problem)
    params.log_depth += rng.normal(0, 0.05, params.log_depth.shape)
    params.trans += rng.normal(0, 0.05, params.trans.shape)
    params.log_focal += rng.normal(0, 0.05, params.log_focal.shape)
    params.log_scale += rng.normal(0, 0.05, params.log_scale.shape)
    weights = problem.conf * rng.uniform(0.2, 1.0, problem.conf.shape)
    _, grad = objective_and_gradient(params, problem, weights, mu=mu)
    errors = {}
    for name, g in grad.items():
        fd = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            d = np.zeros_like(g)
            d[idx] = h
            fp = objective_value(apply_increment(params, {name: d}), problem, weights, mu=mu)
            fm = objective_value(apply_increment(params, {name: -d}), problem, weights, mu=mu)
            fd[idx] = (fp - fm) / (2 * h)
        errors[name] = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    return errors
