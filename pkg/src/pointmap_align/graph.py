"""View graph, maximum-confidence spanning tree and initial parameter propagation."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DisconnectedGraphError, InvalidInputError, MissingReverseError
from .geometry import PoseSE3, Sim3
from .pairwise import PairPrediction, estimate_focal, estimate_relative_pose

logger = logging.getLogger(__name__)

Pair = tuple[int, int]


@dataclass(frozen=True)
class ViewGraph:
    """Views ``0..N-1`` connected by undirected edges, each backed by both directed predictions."""

    num_views: int
    predictions: dict[Pair, PairPrediction]
    edges: tuple[Pair, ...]

    @property
    def keys(self) -> list[Pair]:
        """Directed prediction keys in lexicographic order."""
        return sorted(self.predictions)

    @property
    def height(self) -> int:
        return next(iter(self.predictions.values())).shape[0]

    @property
    def width(self) -> int:
        return next(iter(self.predictions.values())).shape[1]

    def edge_score(self, edge: Pair) -> float:
        """Mean of every confidence value in both directed predictions of ``edge``."""
        i, j = edge
        a, b = self.predictions[(i, j)], self.predictions[(j, i)]
        return float(np.concatenate([a.conf_src.ravel(), a.conf_tgt.ravel(), b.conf_src.ravel(), b.conf_tgt.ravel()]).mean())


def build_view_graph(predictions, num_views: int) -> ViewGraph:
    """Group directed predictions into undirected edges.

    Raises
    ------
    MissingReverseError
        When ``(i, j)`` is present without ``(j, i)``.
    InvalidInputError
        Out-of-range ids, duplicates or mismatched resolutions.
    """
    num_views = int(num_views)
    by_key: dict[Pair, PairPrediction] = {}
    shape = None
    for p in predictions:
        i, j = p.key
        if not (0 <= i < num_views and 0 <= j < num_views):
            raise InvalidInputError(f"prediction {p.key} references a view outside [0, {num_views})")
        if p.key in by_key:
            raise InvalidInputError(f"duplicate prediction for pair {p.key}")
        if shape is None:
            shape = p.shape
        elif p.shape != shape:
            raise InvalidInputError(f"prediction {p.key} has resolution {p.shape}, expected {shape}")
        by_key[p.key] = p
    if not by_key:
        raise InvalidInputError("no predictions given")
    for i, j in sorted(by_key):
        if (j, i) not in by_key:
            raise MissingReverseError((j, i), (i, j))
    edges = tuple(sorted((i, j) for i, j in by_key if i < j))
    return ViewGraph(num_views, dict(sorted(by_key.items())), edges)


@dataclass(frozen=True)
class SpanningTree:
    edges: tuple[Pair, ...]
    root: Pair


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def extract_spanning_tree(graph: ViewGraph) -> SpanningTree:
    """Maximum-total-score spanning tree (Kruskal, ties broken lexicographically on the edge).

    The root is the highest-scoring tree edge.
    """
    order = sorted(graph.edges, key=lambda e: (-graph.edge_score(e), e))
    uf = _UnionFind(graph.num_views)
    tree = [e for e in order if uf.union(*e)]
    if len(tree) != graph.num_views - 1:
        comps: dict[int, list[int]] = {}
        for v in range(graph.num_views):
            comps.setdefault(uf.find(v), []).append(v)
        raise DisconnectedGraphError(list(comps.values()))
    return SpanningTree(edges=tuple(sorted(tree)), root=order[0])


@dataclass
class PairwiseEstimates:
    """Per directed pair ``(i, j)``: view ``i``'s focal and the Procrustes similarity
    mapping prediction ``(i, j)`` coordinates onto prediction ``(j, i)`` coordinates.
    ``None`` marks a degenerate estimate."""

    focals: dict[Pair, float | None] = field(default_factory=dict)
    relative: dict[Pair, tuple[PoseSE3, float] | None] = field(default_factory=dict)


def compute_pairwise_estimates(graph: ViewGraph) -> PairwiseEstimates:
    est = PairwiseEstimates()
    h, w = graph.height, graph.width
    for (i, j), p in graph.predictions.items():
        try:
            est.focals[(i, j)] = estimate_focal(p.points_src, p.conf_src, w, h)
        except DegenerateInputError as exc:
            logger.warning("focal estimate for %s is degenerate: %s", (i, j), exc)
            est.focals[(i, j)] = None
        rev = graph.predictions[(j, i)]
        try:
            est.relative[(i, j)] = estimate_relative_pose(p.points_src, rev.points_tgt, p.conf_src, rev.conf_tgt)
        except DegenerateInputError as exc:
            logger.warning("relative pose for %s is degenerate: %s", (i, j), exc)
            est.relative[(i, j)] = None
    return est


@dataclass
class GlobalState:
    """Optimization variables of the global alignment.

    ``poses`` are camera-to-world, ``depths`` are z-depths in world units, and each
    directed prediction ``k`` maps into the world as ``scale_k * (R_k @ X + t_k)``.
    """

    poses: list[PoseSE3]
    focals: np.ndarray
    depths: np.ndarray
    edge_poses: dict[Pair, PoseSE3]
    edge_scales: dict[Pair, float]

    def __post_init__(self):
        self.focals = np.asarray(self.focals, dtype=float)
        self.depths = np.asarray(self.depths, dtype=float)
        if len(self.poses) != len(self.focals) or len(self.depths) != len(self.focals):
            raise InvalidInputError("poses, focals and depths must cover the same views")

    @property
    def num_views(self) -> int:
        return len(self.poses)

    def scale_product(self) -> float:
        return float(np.exp(np.sum(np.log(list(self.edge_scales.values())))))

    def copy(self) -> "GlobalState":
        return GlobalState(
            list(self.poses),
            self.focals.copy(),
            self.depths.copy(),
            dict(self.edge_poses),
            dict(self.edge_scales),
        )


def _self_scale(p_from: PairPrediction, p_to: PairPrediction) -> float:
    """Scale taking ``p_from``'s self-view points onto ``p_to``'s (same camera frame).

    Confidence-weighted geometric mean of point-norm ratios, so that swapping the
    arguments inverts the result exactly.
    """
    n_from = np.linalg.norm(p_from.points_src, axis=-1)
    n_to = np.linalg.norm(p_to.points_src, axis=-1)
    w = p_from.conf_src * p_to.conf_src
    ok = (w > 0) & (n_from > 0) & (n_to > 0)
    if not ok.any():
        raise DegenerateInputError(f"no common support between predictions {p_from.key} and {p_to.key}")
    return float(np.exp(np.sum(w[ok] * np.log(n_to[ok] / n_from[ok])) / np.sum(w[ok])))


def _reference_predictions(graph: ViewGraph) -> dict[int, Pair]:
    """Per view, the prediction with that view as source and the highest mean self-confidence."""
    ref: dict[int, Pair] = {}
    for key in graph.keys:
        v = key[0]
        score = float(graph.predictions[key].conf_src.mean())
        if v not in ref or score > float(graph.predictions[ref[v]].conf_src.mean()):
            ref[v] = key
    return ref


def propagate_initialization(graph: ViewGraph, tree: SpanningTree, estimates: PairwiseEstimates) -> GlobalState:
    """Place all views by composing pairwise similarities outward from the root pair.

    The root prediction's frame becomes the world, so the root pair's source view
    sits at the origin. Crossing tree edge ``{a, b}`` (``a < b``) always uses the
    Procrustes estimate of prediction ``(a, b)``, inverted when walking from ``b``
    to ``a``. Within a view, every prediction is tied to one reference prediction
    (highest mean self-confidence) by the ratio of their self-view point maps.
    Neither choice depends on the root, so re-rooting only changes the gauge.
    Depths are the per-pixel median of the z-values of all the view's self-view
    point maps, each brought to world scale.
    """
    n = graph.num_views
    root_view, _ = tree.root
    adjacency: dict[int, list[int]] = {v: [] for v in range(n)}
    for a, b in tree.edges:
        adjacency[a].append(b)
        adjacency[b].append(a)

    ref = _reference_predictions(graph)
    if len(ref) != n:
        raise InvalidInputError("every view needs at least one prediction with it as source")
    to_world: dict[Pair, Sim3] = {}

    def tie(key: Pair, target: Pair) -> Sim3:
        # scaling that maps prediction ``key`` coordinates onto prediction ``target`` coordinates
        if key == target:
            return Sim3.identity()
        return Sim3(_self_scale(graph.predictions[key], graph.predictions[target]), np.eye(3), np.zeros(3))

    def place(key: Pair, sim: Sim3) -> None:
        v = key[0]
        to_world[ref[v]] = sim.compose(tie(ref[v], key))

    def pred_to_world(key: Pair) -> Sim3:
        if key not in to_world:
            to_world[key] = to_world[ref[key[0]]].compose(tie(key, ref[key[0]]))
        return to_world[key]

    place(tree.root, Sim3.identity())
    queue = deque([root_view])
    seen = {root_view}
    while queue:
        i = queue.popleft()
        for j in sorted(adjacency[i]):
            if j in seen:
                continue
            a, b = min(i, j), max(i, j)
            rel = estimates.relative.get((a, b))
            if rel is None:
                raise DegenerateInputError(f"cannot propagate over tree edge {(a, b)}: degenerate pairwise estimate")
            pose, s = rel
            ab_to_ba = Sim3(s, pose.rotation, s * pose.translation)
            if i == a:
                place((j, i), pred_to_world((i, j)).compose(ab_to_ba.inverse()))
            else:
                place((j, i), pred_to_world((i, j)).compose(ab_to_ba))
            seen.add(j)
            queue.append(j)
    if len(seen) != n:
        raise InvalidInputError("spanning tree does not reach every view")

    poses, depths, focals = [], [], []
    for v in range(n):
        sim = to_world[ref[v]]
        poses.append(PoseSE3(sim.rotation, sim.translation))
        # per-pixel median over every self-prediction of the view, in world units
        zs = [pred_to_world(k).scale * graph.predictions[k].points_src[..., 2] for k in graph.keys if k[0] == v]
        z = np.median(np.stack(zs), axis=0)
        good = z > 0
        if not good.any():
            raise DegenerateInputError(f"view {v} has no point in front of the camera")
        depths.append(np.where(good, z, np.median(z[good])))

        num = den = 0.0
        for key, p in graph.predictions.items():
            f = estimates.focals.get(key)
            if key[0] == v and f is not None:
                c = float(p.conf_src.sum())
                num += c * f
                den += c
        if den <= 0:
            raise DegenerateInputError(f"no usable focal estimate for view {v}")
        focals.append(num / den)

    edge_poses, edge_scales = {}, {}
    for key in graph.keys:
        sim = pred_to_world(key)
        edge_poses[key] = PoseSE3(sim.rotation, sim.translation / sim.scale)
        edge_scales[key] = float(sim.scale)
    return GlobalState(poses, np.array(focals), np.stack(depths), edge_poses, edge_scales)


def initialize(graph: ViewGraph) -> tuple[GlobalState, SpanningTree]:
    """Pairwise estimates, spanning tree and propagation, followed by scale normalization."""
    from .align import normalize_scales

    tree = extract_spanning_tree(graph)
    state = propagate_initialization(graph, tree, compute_pairwise_estimates(graph))
    return normalize_scales(state), tree
