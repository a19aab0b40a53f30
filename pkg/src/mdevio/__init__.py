"""Sliding-window visual-inertial odometry with learned monocular depth priors."""

from .estimator import Estimator, EstimatorConfig, run_sequence
from .evaluation import Trajectory, ate_rmse
from .geometry import Camera, Pose
from .simulator import NOISE_PRESETS, SCENE_PRESETS, generate_sequence

__all__ = ["Camera", "Estimator", "EstimatorConfig", "NOISE_PRESETS", "Pose", "SCENE_PRESETS", "Trajectory",
           "ate_rmse", "generate_sequence", "run_sequence"]
