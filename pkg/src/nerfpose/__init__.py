"""Camera pose estimation by inverting differentiable radiance fields.

Poses are optimized on SO(3) x T(3) with decoupled Adam, in parallel
hypothesis pools that are periodically resampled by loss.
"""

from .camera import Intrinsics, RaySampleBatch, orbit_poses, pixel_to_ray, stratified_samples
from .estimators import GridFieldRegressor, PoseEstimator
from .fields import (AnalyticScene, SoftBox, SoftSphere, VoxelGridField, load_checkpoint, reference_scene,
                     save_checkpoint, single_sphere_scene)
from .lie import Pose, Pose2, exp_so3, geodesic_rotation_error, log_so3, perturb_pose, rotation_error, \
    translation_error
from .losses import CorruptionSpec, Loss, LossKind, corrupt_image, loss_value_and_grad
from .optim import AdamState, OptimizerConfig, adam_step, lr_at
from .render import PoseGradient, render_image, render_rays
from .search import SearchConfig, SearchDiverged, SearchTrace, run_search

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AnalyticScene", "CorruptionSpec", "GridFieldRegressor", "Intrinsics", "Loss", "LossKind",
    "OptimizerConfig", "Pose", "Pose2", "PoseEstimator", "PoseGradient", "RaySampleBatch", "SearchConfig",
    "SearchDiverged", "SearchTrace", "SoftBox", "SoftSphere", "VoxelGridField", "adam_step", "corrupt_image",
    "exp_so3", "geodesic_rotation_error", "load_checkpoint", "log_so3", "loss_value_and_grad", "lr_at",
    "orbit_poses", "perturb_pose", "pixel_to_ray", "reference_scene", "render_image", "render_rays",
    "rotation_error", "run_search", "save_checkpoint", "single_sphere_scene", "stratified_samples",
    "translation_error",
]
