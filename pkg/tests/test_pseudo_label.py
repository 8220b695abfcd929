import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointmap_align.errors import DegenerateInputError, InvalidInputError
from pointmap_align.graph import initialize
from pointmap_align.pseudo_label import (
    DEFAULT_CUTOFF,
    LossConfig,
    confidence_aware_loss,
    generate_pseudo_labels,
    normalization_factor,
    regression_loss,
    world_points,
)
from scenarios import aligned, scene_and_graph


def test_loss_config_defaults_and_validation():
    c = LossConfig()
    assert c.cutoff == DEFAULT_CUTOFF == 1.5
    assert c.alpha >= 0
    with pytest.raises(InvalidInputError):
        LossConfig(alpha=-1.0)
    with pytest.raises(InvalidInputError):
        LossConfig(cutoff=0.0)


def _const_weights(graph, value):
    return {k: np.full((2, graph.height, graph.width), value) for k in graph.keys}


def test_all_weights_above_cutoff_keep_everything():
    _, graph, _ = scene_and_graph(0)
    state, _ = initialize(graph)
    labels = generate_pseudo_labels(state, _const_weights(graph, 2.0), graph, cutoff=1.5)
    assert labels.retained_fraction() == 1.0
    for (i, j), lab in labels.labels.items():
        to_i = state.poses[i].inverse()
        for idx, v in enumerate((i, j)):
            np.testing.assert_allclose(lab[idx], to_i.apply(world_points(state, v)), atol=1e-12)


def test_weight_equal_to_cutoff_is_excluded():
    _, graph, _ = scene_and_graph(0)
    state, _ = initialize(graph)
    weights = _const_weights(graph, 2.0)
    key = graph.keys[0]
    weights[key][1, 2, 3] = 1.5
    labels = generate_pseudo_labels(state, weights, graph, cutoff=1.5)
    assert not labels.masks[key][1, 2, 3]
    assert np.all(np.isnan(labels.labels[key][1, 2, 3]))
    assert labels.retained_count() == labels.total_count() - 1


def test_noiseless_labels_match_ground_truth_up_to_scale():
    scene, graph, _ = scene_and_graph(0, "clean")
    state, _ = initialize(graph)
    labels = generate_pseudo_labels(state, _const_weights(graph, 10.0), graph)
    for key, lab in labels.labels.items():
        gt = np.stack(scene.gt_pair_points[key])
        s = np.sum(lab * gt) / np.sum(lab * lab)
        np.testing.assert_allclose(s * lab, gt, atol=1e-6)


def test_masks_monotone_in_cutoff():
    result = aligned(0, "outliers", True)
    _, graph, _ = scene_and_graph(0, "outliers")
    prev = None
    for cutoff in (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0):
        masks = generate_pseudo_labels(result.state, result.weights, graph, cutoff).masks
        if prev is not None:
            for k in graph.keys:
                assert not np.any(masks[k] & ~prev[k])
        prev = masks


def test_normalization_factor_examples():
    pi = np.array([[[3.0, 0.0, 0.0]]])
    pj = np.array([[[0.0, 0.0, 5.0]]])
    one = np.ones((1, 1), bool)
    assert normalization_factor(pi, one, pj, one) == 4.0
    rng = np.random.default_rng(0)
    unit = rng.normal(size=(4, 5, 3))
    unit /= np.linalg.norm(unit, axis=-1, keepdims=True)
    assert normalization_factor(unit, np.ones((4, 5), bool), unit, np.ones((4, 5), bool)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        normalization_factor(pi, ~one, pj, ~one)


def test_normalization_factor_matches_resummation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pi, pj = rng.normal(size=(6, 8, 3)), rng.normal(size=(6, 8, 3))
        mi, mj = rng.random((6, 8)) > 0.4, rng.random((6, 8)) > 0.4
        norms = [np.sqrt(x @ x) for x in pi[mi]] + [np.sqrt(x @ x) for x in pj[mj]]
        assert abs(normalization_factor(pi, mi, pj, mj) - sum(norms) / len(norms)) < 1e-12


def test_regression_loss_examples():
    rng = np.random.default_rng(2)
    label = rng.normal(size=(6, 8, 3))
    mask = rng.random((6, 8)) > 0.3
    assert np.all(regression_loss(label, label, mask, 1.7, 1.7) == 0)
    np.testing.assert_allclose(regression_loss(2 * label, label, mask, 3.4, 1.7), 0.0, atol=1e-15)
    pred = rng.normal(size=(6, 8, 3))
    out = regression_loss(pred, label, mask, 1.3, 0.8)
    for y, x in np.ndindex(6, 8):
        expected = np.linalg.norm(pred[y, x] / 1.3 - label[y, x] / 0.8) if mask[y, x] else 0.0
        assert abs(out[y, x] - expected) < 1e-12
    with pytest.raises(InvalidInputError):
        regression_loss(pred, label, mask, 0.0, 1.0)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_regression_loss_joint_rescale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    pred, label = rng.normal(size=(3, 4, 3)), rng.normal(size=(3, 4, 3))
    mask = np.ones((3, 4), bool)
    a = regression_loss(pred, label, mask, 1.1, 0.9)
    b = regression_loss(lam * pred, label, mask, lam * 1.1, 0.9)
    np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-14)


def test_confidence_aware_loss_examples():
    rng = np.random.default_rng(3)
    losses = rng.uniform(0, 1, (6, 8))
    mask = rng.random((6, 8)) > 0.5
    assert confidence_aware_loss(losses, np.ones((6, 8)), mask, 0.2) == pytest.approx(losses[mask].sum(), rel=1e-14)
    n = int(mask.sum())
    assert confidence_aware_loss(np.zeros((6, 8)), np.full((6, 8), np.e), mask, 1.0) == pytest.approx(-n, rel=1e-14)
    conf = rng.uniform(0.1, 5, (6, 8))
    expected = sum(conf[p] * losses[p] - 0.3 * np.log(conf[p]) for p in zip(*np.nonzero(mask)))
    assert abs(confidence_aware_loss(losses, conf, mask, 0.3) - expected) < 1e-10
    conf[mask.nonzero()[0][0], mask.nonzero()[1][0]] = 0.0
    with pytest.raises(InvalidInputError):
        confidence_aware_loss(losses, conf, mask, 0.3)
    # non-positive confidence outside the mask is ignored
    conf = np.where(mask, 1.0, -1.0)
    confidence_aware_loss(losses, conf, mask, 0.3)


@given(st.floats(1e-3, 10.0), st.floats(1e-3, 2.0))
@settings(max_examples=100, deadline=None)
def test_confidence_aware_loss_minimized_at_alpha_over_loss(loss, alpha):
    one = np.ones((1, 1), bool)
    c_star = alpha / loss
    f = lambda c: confidence_aware_loss(np.array([[loss]]), np.array([[c]]), one, alpha)
    best = f(c_star)
    for factor in (0.5, 0.9, 0.99, 1.01, 1.1, 2.0):
        assert f(c_star * factor) >= best
