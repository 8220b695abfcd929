"""Command-line driver: simulate, align, pseudo-label, evaluate and the combined pipeline.

Exit codes: 0 success, 2 invalid configuration or input, 3 view-graph error,
4 optimizer divergence, 5 missing ground truth.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .align import AlignConfig, optimize, raw_confidences
from .errors import AlignError, DivergenceError, GraphError, InvalidInputError
from .geometry import umeyama
from .graph import GlobalState, build_view_graph, initialize
from .metrics import accuracy_completeness, afe, ate, avg_point_error, spearman
from .pseudo_label import DEFAULT_CUTOFF, generate_pseudo_labels, world_points
from .synth import NoiseModel, SceneConfig, generate_scene, render_pair_predictions
from .tensor_io import SceneManifest, load_pose, load_tensor, pose_from_stored, read_json, save_tensor, write_json, write_ply

logger = logging.getLogger("pointmap_align")

EXIT_OK, EXIT_CONFIG, EXIT_GRAPH, EXIT_DIVERGENCE, EXIT_NO_GT = 0, 2, 3, 4, 5

METRIC_KEYS = (
    "ate",
    "afe_percent",
    "accuracy",
    "completeness",
    "avg_point_error",
    "spearman_weight_vs_neg_error",
    "spearman_rawconf_vs_neg_error",
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _pair_stem(key) -> str:
    return f"{key[0]}_{key[1]}"


# --- simulate ----------------------------------------------------------------


def _load_config(path, cls):
    if path is None:
        return cls()
    try:
        return cls.from_dict(read_json(path))
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid config {path}: {exc}") from exc


def run_simulate(config_path, noise_path, seed: int, out) -> Path:
    """Generate a scene plus predictions and write them under ``out``; returns the manifest path."""
    scene_cfg = _load_config(config_path, SceneConfig)
    noise = _load_config(noise_path, NoiseModel)
    if seed is not None:
        scene_cfg.seed = int(seed)
    try:
        scene_cfg.validate()
        noise.validate()
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out = Path(out)
    scene = generate_scene(scene_cfg)
    preds, outlier_masks = render_pair_predictions(scene, noise, scene_cfg.seed, return_outlier_masks=True)

    pairs = {}
    for p in preds:
        stem = _pair_stem(p.key)
        entry = {}
        for name in ("points_src", "points_tgt", "conf_src", "conf_tgt"):
            rel = f"pairs/{stem}_{name}.json"
            save_tensor(out / rel, getattr(p, name), "f32")
            entry[name] = rel
        rel = f"pairs/{stem}_outliers.json"
        save_tensor(out / rel, outlier_masks[p.key], "u8")
        entry["outliers"] = rel
        pairs[SceneManifest.pair_name(p.key)] = entry

    gt = {"focals": [float(f) for f in scene.gt_focals], "poses": [], "pair_points": {}}
    for v, pose in enumerate(scene.gt_poses):
        rel = f"gt/pose_{v}.json"
        save_tensor(out / rel, pose.as_matrix(), "f32")
        gt["poses"].append(rel)
    for key, (src, tgt) in sorted(scene.gt_pair_points.items()):
        stem = _pair_stem(key)
        rels = [f"gt/pair_{stem}_src.json", f"gt/pair_{stem}_tgt.json"]
        save_tensor(out / rels[0], src, "f32")
        save_tensor(out / rels[1], tgt, "f32")
        gt["pair_points"][SceneManifest.pair_name(key)] = rels
    save_tensor(out / "gt/surface_points.json", scene.surface_points, "f32")
    gt["surface_points"] = "gt/surface_points.json"
    gt["scene_extent"] = float(scene_cfg.scene_extent)
    gt["scene_config"] = scene_cfg.to_dict()
    gt["noise_model"] = noise.to_dict()
    gt["fallback_surface"] = bool(scene.fallback_surface)

    manifest = SceneManifest(scene_cfg.num_views, scene_cfg.width, scene_cfg.height, pairs, gt)
    return manifest.write(out / "manifest.json")


# --- align -------------------------------------------------------------------


def _read_manifest(path) -> SceneManifest:
    try:
        return SceneManifest.read(path)
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _load_graph(manifest: SceneManifest):
    try:
        preds = manifest.load_predictions()
        return build_view_graph(preds, manifest.num_views)
    except GraphError as exc:
        raise CliError(EXIT_GRAPH, str(exc)) from exc
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def write_state(out: Path, state: GlobalState) -> None:
    for v, pose in enumerate(state.poses):
        save_tensor(out / f"poses/pose_{v}.json", pose.as_matrix(), "f32")
        save_tensor(out / f"depths/depth_{v}.json", state.depths[v], "f32")
    write_json(out / "focals.json", [float(f) for f in state.focals])
    write_json(
        out / "pairs.json",
        {
            SceneManifest.pair_name(k): {"pose": state.edge_poses[k].as_matrix().tolist(), "scale": state.edge_scales[k]}
            for k in sorted(state.edge_poses)
        },
    )


def read_state(aligned: Path, num_views: int) -> GlobalState:
    aligned = Path(aligned)
    try:
        poses = [load_pose(aligned / f"poses/pose_{v}.json") for v in range(num_views)]
        depths = np.stack([load_tensor(aligned / f"depths/depth_{v}.json").astype(float) for v in range(num_views)])
        focals = np.array(read_json(aligned / "focals.json"), dtype=float)
        pairs = read_json(aligned / "pairs.json")
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read aligned outputs in {aligned}: {exc}") from exc
    edge_poses = {SceneManifest.parse_pair(k): pose_from_stored(v["pose"]) for k, v in pairs.items()}
    edge_scales = {SceneManifest.parse_pair(k): float(v["scale"]) for k, v in pairs.items()}
    return GlobalState(poses, focals, depths, edge_poses, edge_scales)


def read_weights(aligned: Path, keys) -> dict:
    return {k: load_tensor(Path(aligned) / f"weights/{_pair_stem(k)}.json").astype(float) for k in keys}


def run_align(manifest_path, config: AlignConfig, out) -> Path:
    try:
        config.validate()
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    manifest = _read_manifest(manifest_path)
    graph = _load_graph(manifest)
    try:
        state, tree = initialize(graph)
        result = optimize(state, graph, config)
    except GraphError as exc:
        raise CliError(EXIT_GRAPH, str(exc)) from exc
    except DivergenceError as exc:
        raise CliError(EXIT_DIVERGENCE, str(exc)) from exc
    except AlignError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc

    out = Path(out)
    write_state(out, result.state)
    for key, w in sorted(result.weights.items()):
        save_tensor(out / f"weights/{_pair_stem(key)}.json", w, "f32")
    write_json(out / "objective_trace.json", [float(x) for x in result.objective_trace])
    write_json(
        out / "align_config.json",
        {
            "mu": config.mu,
            "steps": config.steps,
            "learning_rate": config.learning_rate,
            "weight_update_every": config.weight_update_every,
            "conf_floor": config.conf_floor,
            "robust": config.robust,
            "residual_epsilon": config.residual_epsilon,
            "spanning_tree": [list(e) for e in tree.edges],
            "tree_root": list(tree.root),
        },
    )
    fused = np.concatenate([world_points(result.state, v).reshape(-1, 3) for v in range(result.state.num_views)])
    write_ply(out / "fused.ply", fused)
    return out


# --- pseudo-label ------------------------------------------------------------


def run_pseudo_label(manifest_path, aligned, cutoff: float, out) -> Path:
    if not (np.isfinite(cutoff) and cutoff >= 0):
        raise CliError(EXIT_CONFIG, f"cutoff must be non-negative, got {cutoff}")
    manifest = _read_manifest(manifest_path)
    graph = _load_graph(manifest)
    state = read_state(aligned, manifest.num_views)
    try:
        weights = read_weights(aligned, graph.keys)
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    labels = generate_pseudo_labels(state, weights, graph, cutoff)
    out = Path(out)
    per_pair = {}
    for key in graph.keys:
        stem = _pair_stem(key)
        save_tensor(out / f"labels/{stem}.json", labels.labels[key], "f32")
        save_tensor(out / f"masks/{stem}.json", labels.masks[key], "u8")
        per_pair[SceneManifest.pair_name(key)] = int(labels.masks[key].sum())
    write_json(
        out / "summary.json",
        {
            "cutoff": float(cutoff),
            "retained": labels.retained_count(),
            "total": labels.total_count(),
            "fraction_retained": labels.retained_fraction(),
            "retained_per_pair": per_pair,
        },
    )
    return out


# --- evaluate ----------------------------------------------------------------


def _safe_spearman(x, y):
    try:
        return spearman(x, y)
    except AlignError:
        return None


def compute_metrics(graph, state: GlobalState, weights, gt_poses, gt_focals, gt_pair_points, surface_points, labels=None) -> dict:
    """Metric report comparing an aligned state (and optional labels) against ground truth."""
    metrics = dict.fromkeys(METRIC_KEYS)
    metrics["ate"] = ate(state.poses, gt_poses)
    metrics["afe_percent"] = afe(state.focals, gt_focals)

    # dense similarity from reconstructed to ground-truth world, using pixel correspondences
    rec = np.concatenate([world_points(state, v).reshape(-1, 3) for v in range(state.num_views)])
    gtw = np.concatenate([gt_poses[v].apply(_gt_self_points(gt_pair_points, v, state.num_views)).reshape(-1, 3) for v in range(state.num_views)])
    r, t, s = umeyama(rec, gtw)
    rec_aligned = s * rec @ r.T + t
    metrics["accuracy"], metrics["completeness"] = accuracy_completeness(rec_aligned, surface_points)

    errs = []
    raw = raw_confidences(graph)
    err_all, w_all, c_all = [], [], []
    for key in graph.keys:
        i, j = key
        to_i = state.poses[i].inverse()
        gt = gt_pair_points[key]
        for idx, v in enumerate((i, j)):
            if labels is not None:
                pred, mask = labels.labels[key][idx], labels.masks[key][idx]
                if mask.any():
                    errs.append(avg_point_error(np.nan_to_num(pred), gt[idx], pred_mask=mask))
            else:
                errs.append(avg_point_error(to_i.apply(world_points(state, v)), gt[idx]))
        p = graph.predictions[key]
        err_all.append(np.linalg.norm(np.stack([p.points_src, p.points_tgt]) - gt, axis=-1).ravel())
        w_all.append(np.asarray(weights[key]).ravel())
        c_all.append(raw[key].ravel())
    metrics["avg_point_error"] = float(np.mean(errs)) if errs else None
    neg_err = -np.concatenate(err_all)
    metrics["spearman_weight_vs_neg_error"] = _safe_spearman(np.concatenate(w_all), neg_err)
    metrics["spearman_rawconf_vs_neg_error"] = _safe_spearman(np.concatenate(c_all), neg_err)
    return metrics


def _gt_self_points(gt_pair_points, v, n):
    for u in range(n):
        if (v, u) in gt_pair_points:
            return gt_pair_points[(v, u)][0]
    raise InvalidInputError(f"no ground-truth points for view {v}")


def run_evaluate(manifest_path, aligned, labels_dir, out) -> dict:
    manifest = _read_manifest(manifest_path)
    gt = manifest.ground_truth or {}
    if not manifest.has_ground_truth or "pair_points" not in gt or "surface_points" not in gt:
        raise CliError(EXIT_NO_GT, f"manifest {manifest_path} carries no ground truth")
    graph = _load_graph(manifest)
    state = read_state(aligned, manifest.num_views)
    try:
        weights = read_weights(aligned, graph.keys)
        gt_poses = manifest.load_gt_poses()
        gt_pairs = manifest.load_gt_pair_points()
        surface = load_tensor(manifest.resolve(gt["surface_points"])).astype(float)
    except (InvalidInputError, OSError) as exc:
        raise CliError(EXIT_NO_GT, f"cannot load ground truth: {exc}") from exc
    labels = None
    if labels_dir is not None:
        labels = _read_labels(labels_dir, graph.keys)
    try:
        metrics = compute_metrics(graph, state, weights, gt_poses, gt["focals"], gt_pairs, surface, labels)
    except AlignError as exc:
        raise CliError(EXIT_CONFIG, f"evaluation failed: {exc}") from exc
    write_json(out, metrics)
    return metrics


def _read_labels(labels_dir, keys):
    from .pseudo_label import PseudoLabelSet

    labels_dir = Path(labels_dir)
    try:
        summary = read_json(labels_dir / "summary.json")
        lab = {k: load_tensor(labels_dir / f"labels/{_pair_stem(k)}.json").astype(float) for k in keys}
        masks = {k: load_tensor(labels_dir / f"masks/{_pair_stem(k)}.json").astype(bool) for k in keys}
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read labels in {labels_dir}: {exc}") from exc
    return PseudoLabelSet(lab, masks, float(summary["cutoff"]))


# --- pipeline ----------------------------------------------------------------


def run_pipeline(args) -> None:
    out = Path(args.out)
    manifest = run_simulate(args.config, args.noise, args.seed, out / "sim")
    modes = [("robust", True), ("plain", False)] if args.ab else [("robust" if args.robust else "plain", args.robust)]
    for name, robust in modes:
        base = out / name if args.ab else out
        run_align(manifest, _align_config(args, robust), base / "aligned")
        run_pseudo_label(manifest, base / "aligned", args.cutoff, base / "labels")
        run_evaluate(manifest, base / "aligned", base / "labels", base / "metrics.json")


# --- argument parsing --------------------------------------------------------


def _add_align_options(p):
    d = AlignConfig()
    g = p.add_mutually_exclusive_group()
    g.add_argument("--robust", dest="robust", action="store_true", default=d.robust, help="robust re-weighting (default)")
    g.add_argument("--no-robust", dest="robust", action="store_false", help="plain confidence-weighted alignment")
    p.add_argument("--mu", type=float, default=d.mu)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--weight-update-every", type=int, default=d.weight_update_every)
    p.add_argument("--conf-floor", type=float, default=d.conf_floor)


def _align_config(args, robust=None) -> AlignConfig:
    return AlignConfig(
        mu=args.mu,
        steps=args.steps,
        learning_rate=args.lr,
        weight_update_every=args.weight_update_every,
        conf_floor=args.conf_floor,
        robust=args.robust if robust is None else robust,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointmap-align", description="Multi-view point-map alignment with robust confidence calibration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene and fabricated predictions")
    p.add_argument("--config", type=Path)
    p.add_argument("--noise", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("align", help="initialize and optimize a scene")
    p.add_argument("--manifest", type=Path, required=True)
    _add_align_options(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pseudo-label", help="threshold optimized points into pseudo-labels")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--aligned", type=Path, required=True)
    p.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="compare aligned outputs against ground truth")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--aligned", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pipeline", help="simulate, align, pseudo-label and evaluate in one go")
    p.add_argument("--config", type=Path)
    p.add_argument("--noise", type=Path)
    p.add_argument("--seed", type=int, default=0)
    _add_align_options(p)
    p.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    p.add_argument("--ab", action="store_true", help="run both robust and plain alignment")
    p.add_argument("--out", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            run_simulate(args.config, args.noise, args.seed, args.out)
        elif args.command == "align":
            run_align(args.manifest, _align_config(args), args.out)
        elif args.command == "pseudo-label":
            run_pseudo_label(args.manifest, args.aligned, args.cutoff, args.out)
        elif args.command == "evaluate":
            run_evaluate(args.manifest, args.aligned, args.labels, args.out)
        elif args.command == "pipeline":
            run_pipeline(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
