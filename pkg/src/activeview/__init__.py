"""Learned camera-viewpoint scoring for active visual localization.

A landmark map is split into voxel cells, candidate orientations are sampled
on a spherical Fibonacci lattice, and a small network trained on
self-generated localization outcomes scores every (cell, orientation) pair.
"""

from .evaluation import Policy, ThresholdTiers, evaluate, evaluate_policies, select_viewpoint
from .features import Channels, EncodingConfig, encode
from .model import ModelBundle, TrainConfig, load_bundle, save_bundle, score_grid, score_viewpoint, train
from .oracle import OracleConfig, localize_oracle
from .planner import PlannerParams, PlanProblem, plan, plan_path
from .sampling import build_grid, fibonacci_directions
from .scene import LandmarkCloud, PinholeCamera, Pose, load_cloud
from .supervision import SceneSpec, generate_scene, label_dataset
from .visibility import ViewContext, rank_orientations

__version__ = "0.1.0"

__all__ = [
    "Channels", "EncodingConfig", "LandmarkCloud", "ModelBundle", "OracleConfig", "PinholeCamera",
    "PlanProblem", "PlannerParams", "Policy", "Pose", "SceneSpec", "ThresholdTiers", "TrainConfig",
    "ViewContext", "build_grid", "encode", "evaluate", "evaluate_policies", "fibonacci_directions",
    "generate_scene", "label_dataset", "load_bundle", "load_cloud", "localize_oracle", "plan",
    "plan_path", "rank_orientations", "save_bundle", "score_grid", "score_viewpoint", "select_viewpoint",
    "train",
]
