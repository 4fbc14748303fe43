"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .camera import Intrinsics
from .lie import Pose


def check_image(image, intr: Intrinsics | None = None, name: str = "image") -> np.ndarray:
    """Return ``image`` as a float (H, W, 3) array with finite values in [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if intr is not None and img.shape[:2] != (intr.height, intr.width):
        raise ValueError(f"{name} is {img.shape[1]}x{img.shape[0]}, intrinsics expect {intr.width}x{intr.height}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def check_pose(pose, name: str = "pose") -> Pose:
    """Accept a Pose, 12 numbers (rotation rows then translation), or a
    3x4 / 4x4 camera-to-world matrix."""
    if isinstance(pose, Pose):
        return pose
    arr = np.asarray(pose, dtype=float)
    if arr.shape == (12,):
        return Pose.from_row(arr)
    if arr.shape in ((3, 4), (4, 4)):
        return Pose(arr[:3, :3], arr[:3, 3])
    raise ValueError(f"{name} must be a Pose, 12 numbers or a 3x4/4x4 matrix; got shape {arr.shape}")
