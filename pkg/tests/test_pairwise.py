import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointmap_align.errors import DegenerateInputError, InvalidInputError
from pointmap_align.geometry import centered_pixel_grid, so3_exp
from pointmap_align.pairwise import PairPrediction, estimate_focal, estimate_relative_pose, focal_objective

W, H = 64, 48


def pinhole_points(f, rng, pixel_noise=0.0, w=W, h=H):
    uc, vc = centered_pixel_grid(w, h)
    depth = rng.uniform(1.0, 4.0, size=(h, w))
    un = uc + pixel_noise * rng.normal(size=uc.shape)
    vn = vc + pixel_noise * rng.normal(size=vc.shape)
    return np.stack([depth * un / f, depth * vn / f, depth], axis=-1)


def dense_grid_focal(points, conf, lo=256.0, hi=1024.0, samples=100_000, chunk=2_000):
    """Brute-force minimizer of the focal objective over a uniform grid."""
    uc, vc = centered_pixel_grid(points.shape[1], points.shape[0])
    a = (points[..., :2] / points[..., 2:3]).reshape(-1, 2)
    q = np.stack([uc, vc], axis=-1).reshape(-1, 2)
    c = conf.reshape(-1)
    grid = np.linspace(lo, hi, samples)
    best, best_val = None, np.inf
    for s in range(0, samples, chunk):
        fs = grid[s : s + chunk]
        vals = np.array([c @ np.linalg.norm(q - f * a, axis=1) for f in fs])
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best, best_val = fs[k], vals[k]
    return best


def test_exact_pinhole_focal():
    pts = pinhole_points(512.0, np.random.default_rng(0))
    f = estimate_focal(pts, np.ones((H, W)), W, H)
    assert abs(f - 512.0) / 512.0 < 1e-6


def test_noisy_focal_matches_grid_search():
    rng = np.random.default_rng(1)
    pts = pinhole_points(512.0, rng, pixel_noise=0.5)
    conf = np.ones((H, W))
    f = estimate_focal(pts, conf, W, H)
    assert abs(f - 512.0) / 512.0 < 0.01
    oracle = dense_grid_focal(pts, conf)
    assert abs(f - oracle) / oracle < 1e-4


def test_zero_confidence_is_degenerate():
    pts = pinhole_points(512.0, np.random.default_rng(2))
    with pytest.raises(DegenerateInputError):
        estimate_focal(pts, np.zeros((H, W)), W, H)


def test_points_behind_camera_are_degenerate():
    pts = pinhole_points(512.0, np.random.default_rng(2))
    pts[..., 2] *= -1
    with pytest.raises(DegenerateInputError):
        estimate_focal(pts, np.ones((H, W)), W, H)


def test_focal_shape_mismatch():
    with pytest.raises(InvalidInputError):
        estimate_focal(np.ones((H, W, 3)), np.ones((H, W)), W + 1, H)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
@settings(max_examples=30, deadline=None)
def test_focal_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    pts = pinhole_points(300.0, rng, pixel_noise=1.0, w=16, h=12)
    conf = rng.uniform(0.1, 5.0, size=(12, 16))
    f1 = estimate_focal(pts, conf, 16, 12)
    f2 = estimate_focal(lam * pts, conf, 16, 12)
    assert abs(f1 - f2) / f1 < 1e-9


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_weiszfeld_objective_non_increasing(seed):
    rng = np.random.default_rng(seed)
    pts = pinhole_points(rng.uniform(10, 60), rng, pixel_noise=rng.uniform(0, 2), w=16, h=12)
    conf = rng.uniform(0.1, 5.0, size=(12, 16))
    f, hist = estimate_focal(pts, conf, 16, 12, return_history=True)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    assert hist[-1] == pytest.approx(focal_objective(f, pts, conf, 16, 12), rel=1e-12)


def test_relative_pose_identity():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(6, 8, 3))
    conf = rng.uniform(0.5, 2.0, size=(6, 8))
    pose, s = estimate_relative_pose(a, a, conf, conf)
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(pose.translation, 0.0, atol=1e-12)
    assert abs(s - 1.0) < 1e-12


def test_relative_pose_known_similarity():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(6, 8, 3))
    r = so3_exp(rng.normal(size=3))
    t = rng.normal(size=3)
    b = 2.0 * (a @ r.T + t)
    pose, s = estimate_relative_pose(a, b, np.ones((6, 8)), np.ones((6, 8)))
    np.testing.assert_allclose(pose.rotation, r, atol=1e-9)
    np.testing.assert_allclose(pose.translation, t, atol=1e-9)
    assert abs(s - 2.0) < 1e-9


def test_relative_pose_ignores_zero_weight_pixels():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 8, 3))
    b = 1.3 * (a @ so3_exp([0.1, 0.2, 0.3]).T + [0.5, 0.0, 1.0]) + 0.01 * rng.normal(size=a.shape)
    ca = rng.uniform(0.5, 2.0, size=(6, 8))
    cb = rng.uniform(0.5, 2.0, size=(6, 8))
    ca[0, :4] = 0.0
    cb[2, 3:] = 0.0
    ref_pose, ref_s = estimate_relative_pose(a, b, ca, cb)
    dirty = b.copy()
    dirty[0, :4] = 1e6 * rng.normal(size=(4, 3))
    dirty[2, 3:] = -1e5
    pose, s = estimate_relative_pose(a, dirty, ca, cb)
    np.testing.assert_allclose(pose.rotation, ref_pose.rotation, atol=1e-12)
    np.testing.assert_allclose(pose.translation, ref_pose.translation, atol=1e-12)
    assert abs(s - ref_s) < 1e-12


def _fit_residual(a, b, w, pose, s):
    pred = s * (a.reshape(-1, 3) @ pose.rotation.T + pose.translation)
    return float(w.reshape(-1) @ np.sum((pred - b.reshape(-1, 3)) ** 2, axis=1))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_relative_pose_equivariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 5, 3))
    b = rng.uniform(0.5, 2) * (a @ so3_exp(rng.normal(size=3)).T + rng.normal(size=3)) + 0.05 * rng.normal(size=a.shape)
    w = rng.uniform(0.1, 2.0, size=(4, 5))
    r0 = so3_exp(rng.normal(size=3))
    pose, s = estimate_relative_pose(a, b, w, np.ones_like(w))
    pose0, s0 = estimate_relative_pose(a @ r0.T, b, w, np.ones_like(w))
    np.testing.assert_allclose(pose0.rotation, pose.rotation @ r0.T, atol=1e-9)
    assert abs(s0 - s) < 1e-9
    assert abs(_fit_residual(a @ r0.T, b, w, pose0, s0) - _fit_residual(a, b, w, pose, s)) < 1e-9


def test_relative_pose_degenerate():
    a = np.zeros((6, 8, 3))
    a[..., 0] = np.arange(8.0)
    with pytest.raises(DegenerateInputError):
        estimate_relative_pose(a, a, np.ones((6, 8)), np.ones((6, 8)))
    b = np.random.default_rng(0).normal(size=(6, 8, 3))
    conf = np.zeros((6, 8))
    conf[0, :2] = 1.0
    with pytest.raises(DegenerateInputError):
        estimate_relative_pose(b, b, conf, conf)


def test_pair_prediction_validation():
    pts = np.ones((6, 8, 3))
    conf = np.ones((6, 8))
    p = PairPrediction(0, 1, pts, pts, conf, conf)
    assert p.key == (0, 1) and p.shape == (6, 8)
    assert not p.points_src.flags.writeable
    with pytest.raises(InvalidInputError):
        PairPrediction(0, 1, pts, pts[:, :4], conf, conf)
    with pytest.raises(InvalidInputError):
        PairPrediction(0, 1, pts, pts, -conf, conf)
    bad = pts.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(InvalidInputError):
        PairPrediction(0, 1, bad, pts, conf, conf)
    with pytest.raises(InvalidInputError):
        PairPrediction(2, 2, pts, pts, conf, conf)
