"""Global alignment of pairwise point maps with robust, calibrated confidences."""

from .align import AlignConfig, AlignResult, normalize_scales, objective, optimize, residuals, update_weights
from .errors import (
    AlignError,
    DegenerateInputError,
    DisconnectedGraphError,
    DivergenceError,
    GraphError,
    InvalidInputError,
    InvalidStateError,
    MissingReverseError,
)
from .geometry import CameraIntrinsics, PoseSE3, Sim3, back_project, project, so3_exp, so3_log, umeyama
from .graph import GlobalState, SpanningTree, ViewGraph, build_view_graph, extract_spanning_tree, initialize
from .metrics import Trajectory, accuracy_completeness, afe, ate, avg_point_error, spearman
from .pairwise import PairPrediction, estimate_focal, estimate_relative_pose
from .pseudo_label import LossConfig, PseudoLabelSet, confidence_aware_loss, generate_pseudo_labels, normalization_factor, regression_loss
from .synth import NoiseModel, SceneConfig, SyntheticScene, generate_scene, render_pair_predictions
from .tensor_io import SceneManifest, TensorContainer

__version__ = "0.1.0"
