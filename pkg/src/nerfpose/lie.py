"""Rotation and pose algebra on SO(3) x T(3), plus the planar variants.

Poses are camera-to-world: a camera-frame point ``x`` maps to
``rotation @ x + translation`` and the camera origin sits at ``translation``.
The camera looks down its local -z axis with x to the right and y up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# below this angle exp/log switch to first-order series
SMALL_ANGLE = 1e-8
# cos(theta) below this uses the symmetric-part axis extraction (theta > ~154 deg)
NEAR_PI_COS = -0.9
REORTHONORMALIZE_EVERY = 100


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Streams with different keys are statistically independent, and a stream
    depends only on its own keys, so work can be split across threads without
    changing any draw.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator; works on (..., 3) and returns (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues map from axis-angle vectors (..., 3) to rotations (..., 3, 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def log_so3(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation, with length in [0, pi].

    The angle comes from ``atan2`` of the skew and trace parts, which stays
    accurate at both ends of the range. Close to pi the skew part vanishes, so
    the axis is read off the symmetric part instead and the skew part only
    picks its sign.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"expected a 3x3 rotation, got shape {R.shape}")
    s_vec = 0.5 * vee(R - R.T)
    s = np.linalg.norm(s_vec)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        return s_vec.copy()
    if c > NEAR_PI_COS:
        return s_vec * (theta / math.sin(theta))
    one_minus_c = 1.0 - math.cos(theta)
    B = 0.5 * (R + R.T) - math.cos(theta) * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(B[k, k] * one_minus_c)
    axis /= np.linalg.norm(axis)
    if axis @ s_vec < 0.0:
        axis = -axis
    return axis * theta


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation (polar projection via SVD); accepts (..., 3, 3)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    d = np.ones(U.shape[:-1])
    d[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * d[..., None, :]) @ Vt


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    w = np.zeros(3)
    w[axis] = angle
    return exp_so3(w)


def geodesic_rotation_error(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in degrees of the relative rotation between ``a`` and ``b``."""
    cos = 0.5 * (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0)
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@dataclass(frozen=True)
class Pose:
    """Camera-to-world extrinsics: an orthonormal rotation and a translation."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must have 3 entries, got {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_row(cls, values: Sequence[float]) -> "Pose":
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.shape != (12,):
            raise ValueError(f"a pose record has 12 numbers, got {v.size}")
        return cls(v[:9].reshape(3, 3), v[9:])

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` whose -z axis points at ``target``."""
        eye = np.asarray(eye, dtype=float)
        back = eye - np.asarray(target, dtype=float)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=float), back)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(np.array([0.0, 1.0, 0.0]), back)
        right /= np.linalg.norm(right)
        cam_up = np.cross(back, right)
        return cls(np.stack([right, cam_up, back], axis=1), eye)

    def to_row(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def translation_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def rotation_error(a: Pose, b: Pose) -> float:
    return geodesic_rotation_error(a.rotation, b.rotation)


def perturb_pose(pose: Pose, rot_range_deg: float, trans_range: float, rng: np.random.Generator) -> Pose:
    """Start-pose generator used by the benchmark.

    Rotates about the camera's own x, then y, then z axis by independent
    uniform angles in ``[-rot_range_deg, rot_range_deg]``, then shifts the
    camera along the world axes by independent uniform offsets in
    ``[-trans_range, trans_range]``. Rotations keep the camera origin fixed.
    """
    if rot_range_deg < 0 or trans_range < 0:
        raise ValueError("perturbation ranges must be non-negative")
    angles = np.radians(rng.uniform(-rot_range_deg, rot_range_deg, size=3))
    offsets = rng.uniform(-trans_range, trans_range, size=3)
    R = pose.rotation
    for axis in range(3):
        R = R @ axis_rotation(axis, angles[axis])
    return Pose(R, pose.translation + offsets)


def write_poses(path, poses: Iterable[Pose]) -> None:
    lines = [" ".join(f"{x:.17g}" for x in p.to_row()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise ValueError(f"{path}:{lineno}: expected 12 numbers, got {len(parts)}")
        poses.append(Pose.from_row([float(x) for x in parts]))
    return poses


# -- planar variants --------------------------------------------------------


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2:
    theta: float
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(-1)
        if t.shape != (2,):
            raise ValueError("planar translation must have 2 entries")
        t.flags.writeable = False
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "translation", t)

    @property
    def rotation(self) -> np.ndarray:
        return rot2(self.theta)

    def matrix(self) -> np.ndarray:
        M = np.eye(3)
        M[:2, :2] = self.rotation
        M[:2, 2] = self.translation
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Pose2":
        M = np.asarray(M, dtype=float)
        return cls(math.atan2(M[1, 0], M[0, 0]), M[:2, 2])


def exp_se2(xi: np.ndarray) -> np.ndarray:
    """Exponential of an se(2) twist ``(vx, vy, omega)`` as a 3x3 matrix."""
    vx, vy, w = (float(x) for x in xi)
    if abs(w) < SMALL_ANGLE:
        a, b = 1.0 - w * w / 6.0, 0.5 * w
    else:
        a, b = math.sin(w) / w, (1.0 - math.cos(w)) / w
    V = np.array([[a, -b], [b, a]])
    M = np.eye(3)
    M[:2, :2] = rot2(w)
    M[:2, 2] = V @ np.array([vx, vy])
    return M
