"""Global point-map alignment by gradient descent, with optional robust re-weighting.

Every directed prediction ``k = (i, j)`` contributes two observations, one per view
``v`` in ``{i, j}``. For pixel ``p`` the residual is

    e = T_v (D_p K_v^-1 (u, v, 1)) - s_k (R_k X_p + t_k)

and the objective is ``sum w * sqrt(|e|^2 + eps^2)``. In robust mode the weights are
reset every few steps to their closed-form minimizer ``C / (1 + |e| / mu)^2`` of
``w |e| + mu (sqrt(w) - sqrt(C))^2``, and the objective includes that regularizer.

Focals, depths and scales are optimized in log space; rotations through left
axis-angle increments. View 0's pose is held fixed and the product of all
prediction scales is kept at 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvalidInputError, InvalidStateError
from .geometry import PoseSE3, centered_pixel_grid, so3_exp
from .graph import GlobalState, Pair, ViewGraph

logger = logging.getLogger(__name__)


@dataclass
class AlignConfig:
    mu: float = 0.01
    steps: int = 300
    learning_rate: float = 0.01
    weight_update_every: int = 10
    conf_floor: float = 0.5
    robust: bool = True
    residual_epsilon: float = 1e-9

    def validate(self) -> None:
        if not self.mu > 0:
            raise InvalidInputError("mu must be positive")
        if int(self.steps) < 0:
            raise InvalidInputError("steps must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if int(self.weight_update_every) < 1:
            raise InvalidInputError("weight_update_every must be a positive integer")
        if not self.conf_floor >= 0:
            raise InvalidInputError("conf_floor must be non-negative")
        if not self.residual_epsilon > 0:
            raise InvalidInputError("residual_epsilon must be positive")


# Weights and residuals are keyed by directed pair; each value stacks the source
# view (index 0) and the target view (index 1).
WeightMaps = dict[Pair, np.ndarray]


class Adam:
    """Adam over a dict of named arrays."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return the update to *add* to each parameter."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = {}
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = -self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
        return out


@dataclass
class Problem:
    """Observations of a view graph packed into arrays."""

    keys: list[Pair]
    num_views: int
    obs_view: np.ndarray  # (2K,)
    obs_pred: np.ndarray  # (2K,)
    points: np.ndarray  # (2K, H, W, 3)
    conf: np.ndarray  # (2K, H, W)
    uc: np.ndarray
    vc: np.ndarray

    @classmethod
    def from_graph(cls, graph: ViewGraph) -> "Problem":
        keys = graph.keys
        obs_view, obs_pred, pts, conf = [], [], [], []
        for k, key in enumerate(keys):
            p = graph.predictions[key]
            obs_view += [key[0], key[1]]
            obs_pred += [k, k]
            pts += [p.points_src, p.points_tgt]
            conf += [p.conf_src, p.conf_tgt]
        uc, vc = centered_pixel_grid(graph.width, graph.height)
        return cls(keys, graph.num_views, np.array(obs_view), np.array(obs_pred), np.stack(pts), np.stack(conf), uc, vc)

    def pack(self, per_obs: np.ndarray) -> dict[Pair, np.ndarray]:
        return {key: per_obs[2 * k : 2 * k + 2] for k, key in enumerate(self.keys)}

    def unpack(self, maps: dict[Pair, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(maps[key], dtype=float) for key in self.keys])


@dataclass
class Params:
    """Array form of :class:`GlobalState` used during optimization."""

    rot: np.ndarray  # (N, 3, 3)
    trans: np.ndarray  # (N, 3)
    log_focal: np.ndarray  # (N,)
    log_depth: np.ndarray  # (N, H, W)
    edge_rot: np.ndarray  # (K, 3, 3)
    edge_trans: np.ndarray  # (K, 3)
    log_scale: np.ndarray  # (K,)

    @classmethod
    def from_state(cls, state: GlobalState, problem: Problem) -> "Params":
        if np.any(state.focals <= 0) or np.any(state.depths <= 0):
            raise InvalidStateError("focals and depths must be positive")
        scales = np.array([state.edge_scales[k] for k in problem.keys], dtype=float)
        if np.any(scales <= 0):
            raise InvalidStateError("edge scales must be positive")
        return cls(
            np.stack([p.rotation for p in state.poses]),
            np.stack([p.translation for p in state.poses]),
            np.log(state.focals),
            np.log(state.depths),
            np.stack([state.edge_poses[k].rotation for k in problem.keys]),
            np.stack([state.edge_poses[k].translation for k in problem.keys]),
            np.log(scales),
        )

    def to_state(self, problem: Problem) -> GlobalState:
        return GlobalState(
            poses=[PoseSE3(_orthonormalize(r), t) for r, t in zip(self.rot, self.trans)],
            focals=np.exp(self.log_focal),
            depths=np.exp(self.log_depth),
            edge_poses={k: PoseSE3(_orthonormalize(r), t) for k, r, t in zip(problem.keys, self.edge_rot, self.edge_trans)},
            edge_scales={k: float(s) for k, s in zip(problem.keys, np.exp(self.log_scale))},
        )

    def copy(self) -> "Params":
        return Params(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))


def _orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def _forward(params: Params, problem: Problem):
    """Residuals (2K, H, W, 3) plus intermediates needed for gradients."""
    f = np.exp(params.log_focal)[:, None, None]
    depth = np.exp(params.log_depth)
    cam = np.stack([depth * problem.uc / f, depth * problem.vc / f, depth], axis=-1)  # (N, H, W, 3)
    rotated = np.einsum("nij,nhwj->nhwi", params.rot, cam)
    world = rotated + params.trans[:, None, None, :]
    rx = np.einsum("oij,ohwj->ohwi", params.edge_rot[problem.obs_pred], problem.points)
    scale = np.exp(params.log_scale)[problem.obs_pred][:, None, None, None]
    mapped = scale * (rx + params.edge_trans[problem.obs_pred][:, None, None, :])
    resid = world[problem.obs_view] - mapped
    return resid, cam, rotated, rx, mapped


def residual_array(params: Params, problem: Problem) -> np.ndarray:
    return _forward(params, problem)[0]


def objective_value(params: Params, problem: Problem, weights: np.ndarray, *, mu=None, eps=1e-9) -> float:
    """Smoothed weighted residual norm; adds ``mu * (sqrt(w) - sqrt(C))^2`` when ``mu`` is given."""
    e = residual_array(params, problem)
    val = float(np.sum(weights * np.sqrt(np.sum(e * e, axis=-1) + eps * eps)))
    if mu is not None:
        val += float(mu * np.sum((np.sqrt(weights) - np.sqrt(problem.conf)) ** 2))
    return val


def objective_and_gradient(params: Params, problem: Problem, weights: np.ndarray, *, mu=None, eps=1e-9):
    """Objective and its gradient with respect to every parameter block.

    Rotation gradients are with respect to a left axis-angle increment at zero;
    log-scale gradients are unconstrained (no product-one projection).
    """
    resid, cam, rotated, rx, mapped = _forward(params, problem)
    norm = np.sqrt(np.sum(resid * resid, axis=-1) + eps * eps)
    val = float(np.sum(weights * norm))
    if mu is not None:
        val += float(mu * np.sum((np.sqrt(weights) - np.sqrt(problem.conf)) ** 2))
    g = (weights / norm)[..., None] * resid  # d objective / d residual

    n = problem.num_views
    g_world = np.zeros((n,) + g.shape[1:])
    np.add.at(g_world, problem.obs_view, g)

    grad = {}
    grad["trans"] = g_world.sum(axis=(1, 2))
    grad["rot"] = np.cross(rotated, g_world).sum(axis=(1, 2))
    grad["log_depth"] = np.sum(g_world * rotated, axis=-1)
    lateral = cam.copy()
    lateral[..., 2] = 0.0
    d_focal = -np.einsum("nij,nhwj->nhwi", params.rot, lateral)
    grad["log_focal"] = np.sum(g_world * d_focal, axis=(1, 2, 3))

    k = len(problem.keys)
    scale = np.exp(params.log_scale)[problem.obs_pred][:, None, None, None]
    sg = scale * g
    grad["edge_trans"] = -_sum_by_pred(sg.sum(axis=(1, 2)), problem.obs_pred, k)
    grad["edge_rot"] = -_sum_by_pred(np.cross(rx, sg).sum(axis=(1, 2)), problem.obs_pred, k)
    grad["log_scale"] = -_sum_by_pred(np.sum(g * mapped, axis=(1, 2, 3)), problem.obs_pred, k)
    return val, grad


def _sum_by_pred(per_obs, obs_pred, k):
    out = np.zeros((k,) + per_obs.shape[1:])
    np.add.at(out, obs_pred, per_obs)
    return out


def apply_increment(params: Params, step: dict[str, np.ndarray]) -> Params:
    """Add an update; rotation entries are left-multiplied axis-angle increments."""
    out = params.copy()
    for name, delta in step.items():
        if name == "rot":
            out.rot = np.einsum("nij,njk->nik", so3_exp(delta), params.rot)
        elif name == "edge_rot":
            out.edge_rot = np.einsum("nij,njk->nik", so3_exp(delta), params.edge_rot)
        else:
            setattr(out, name, getattr(params, name) + delta)
    return out


# --- state-level API -------------------------------------------------------


def residuals(state: GlobalState, graph: ViewGraph) -> dict[Pair, np.ndarray]:
    """Per directed pair, a ``(2, H, W, 3)`` array of residuals for the source and target view."""
    problem = Problem.from_graph(graph)
    _check_dims(state, graph)
    return problem.pack(residual_array(Params.from_state(state, problem), problem))


def raw_confidences(graph: ViewGraph) -> WeightMaps:
    return {key: np.stack([p.conf_src, p.conf_tgt]) for key, p in graph.predictions.items()}


def floored_confidences(graph: ViewGraph, conf_floor: float = 0.5) -> WeightMaps:
    """Raw confidences with entries below ``conf_floor`` set to zero."""
    return {key: np.where(c < conf_floor, 0.0, c) for key, c in raw_confidences(graph).items()}


def objective(state: GlobalState, graph: ViewGraph, weights: WeightMaps, *, robust=False, mu=0.01, eps=1e-9) -> float:
    """``sum w * sqrt(|e|^2 + eps^2)``, plus ``mu * sum (sqrt(w) - sqrt(C))^2`` when ``robust``."""
    problem = Problem.from_graph(graph)
    _check_dims(state, graph)
    params = Params.from_state(state, problem)
    return objective_value(params, problem, problem.unpack(weights), mu=mu if robust else None, eps=eps)


def closed_form_weights(conf, resid_norm, mu: float):
    """Minimizer over ``w >= 0`` of ``w * |e| + mu * (sqrt(w) - sqrt(C))^2``."""
    return np.asarray(conf, dtype=float) / (1.0 + np.asarray(resid_norm, dtype=float) / mu) ** 2


def update_weights(weights, resid, raw_conf, mu: float, conf_floor: float = 0.5) -> WeightMaps:
    """Closed-form weight update ``C / (1 + |e| / mu)^2``, zeroed where ``C < conf_floor``.

    ``weights`` is accepted for interface symmetry; the update does not depend on it.
    """
    if not mu > 0:
        raise InvalidInputError("mu must be positive")
    out = {}
    for key, c in raw_conf.items():
        c = np.asarray(c, dtype=float)
        e = np.linalg.norm(np.asarray(resid[key], dtype=float), axis=-1)
        out[key] = np.where(c < conf_floor, 0.0, closed_form_weights(c, e, mu))
    return out


def normalize_scales(state: GlobalState) -> GlobalState:
    """Divide every prediction scale by their geometric mean.

    The world is shrunk by the same factor (view translations and depths), so all
    residuals scale uniformly and the reconstruction is unchanged up to gauge.
    """
    scales = np.array(list(state.edge_scales.values()), dtype=float)
    if np.any(~np.isfinite(scales)) or np.any(scales <= 0):
        raise InvalidStateError("edge scales must be finite and positive")
    log_g = float(np.mean(np.log(scales)))
    g = np.exp(log_g)
    out = state.copy()
    out.edge_scales = {k: float(np.exp(np.log(s) - log_g)) for k, s in state.edge_scales.items()}
    out.poses = [PoseSE3(p.rotation, p.translation / g) for p in state.poses]
    out.depths = state.depths / g
    return out


def _check_dims(state: GlobalState, graph: ViewGraph):
    if state.num_views != graph.num_views:
        raise InvalidInputError(f"state has {state.num_views} views, graph has {graph.num_views}")
    if state.depths.shape[1:] != (graph.height, graph.width):
        raise InvalidInputError("depth maps do not match the prediction resolution")
    missing = set(graph.predictions) - set(state.edge_scales)
    if missing:
        raise InvalidInputError(f"state lacks pair parameters for {sorted(missing)}")


@dataclass
class AlignResult:
    state: GlobalState
    weights: WeightMaps
    objective_trace: list[float]
    scale_products: list[float] = field(default_factory=list)


def optimize(state: GlobalState, graph: ViewGraph, config: AlignConfig | None = None) -> AlignResult:
    """Run ``config.steps`` Adam steps on poses, focals, depths and pair similarities.

    The objective trace holds the value before each step and after the last one.
    ``scale_products`` records the product of pair scales at the same points.

    Raises
    ------
    DivergenceError
        When the objective or its gradient becomes non-finite.
    """
    # overflow is reported as DivergenceError, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _optimize(state, graph, config)


def _optimize(state: GlobalState, graph: ViewGraph, config: AlignConfig | None) -> AlignResult:
    config = config or AlignConfig()
    config.validate()
    _check_dims(state, graph)
    problem = Problem.from_graph(graph)
    params = Params.from_state(state, problem)
    params.log_scale = params.log_scale - params.log_scale.mean()

    conf = problem.conf
    floored = np.where(conf < config.conf_floor, 0.0, conf)
    mu = config.mu if config.robust else None

    def reweight(p):
        e = np.linalg.norm(residual_array(p, problem), axis=-1)
        return np.where(conf < config.conf_floor, 0.0, closed_form_weights(conf, e, config.mu))

    weights = reweight(params) if config.robust else floored
    adam = Adam(lr=config.learning_rate)
    trace, products = [], []
    for step in range(int(config.steps)):
        if config.robust and step > 0 and step % config.weight_update_every == 0:
            weights = reweight(params)
        val, grad = objective_and_gradient(params, problem, weights, mu=mu, eps=config.residual_epsilon)
        if not np.isfinite(val):
            raise DivergenceError(step)
        if not all(np.all(np.isfinite(g)) for g in grad.values()):
            raise DivergenceError(step, "gradient")
        trace.append(val)
        products.append(float(np.exp(params.log_scale.sum())))
        grad["rot"][0] = 0.0
        grad["trans"][0] = 0.0
        grad["log_scale"] = grad["log_scale"] - grad["log_scale"].mean()
        params = apply_increment(params, adam.step(grad))
        params.log_scale = params.log_scale - params.log_scale.mean()

    if config.robust:
        weights = reweight(params)
    final = objective_value(params, problem, weights, mu=mu, eps=config.residual_epsilon)
    if not np.isfinite(final):
        raise DivergenceError(int(config.steps))
    trace.append(final)
    products.append(float(np.exp(params.log_scale.sum())))
    return AlignResult(params.to_state(problem), problem.pack(weights), trace, products)
