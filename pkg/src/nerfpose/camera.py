"""Pinhole camera model, ray generation and sample placement along rays."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .lie import Pose

# each ray's box interval is widened by this fraction of its length on both ends
NEAR_FAR_MARGIN = 0.05


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels. Image rows grow downward."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / math.tan(0.5 * math.radians(fov_deg))
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass
class RaySampleBatch:
    """Rays with their sample distances.

    ``t`` has shape (n_rays, K) and is strictly increasing within
    ``[near, far]`` per ray; the last compositing interval ends at ``far``.
    """

    pixels: np.ndarray
    origins: np.ndarray
    directions: np.ndarray
    t: np.ndarray
    near: np.ndarray
    far: np.ndarray

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]

    @property
    def points(self) -> np.ndarray:
        return _sample_points(np.ascontiguousarray(self.origins, dtype=float),
                              np.ascontiguousarray(self.directions, dtype=float),
                              np.ascontiguousarray(self.t, dtype=float))

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.t, axis=1, append=self.far[:, None])

    def subset(self, idx) -> "RaySampleBatch":
        return RaySampleBatch(self.pixels[idx], self.origins[idx], self.directions[idx],
                              self.t[idx], self.near[idx], self.far[idx])


@numba.njit(cache=True, nogil=True)
def _sample_points(o, d, t):
    n, k = t.shape
    out = np.empty((n, k, 3))
    for r in range(n):
        for i in range(k):
            for a in range(3):
                out[r, i, a] = o[r, a] + t[r, i] * d[r, a]
    return out


def camera_directions(intr: Intrinsics, u, v) -> np.ndarray:
    """Unit camera-frame directions through continuous pixel coordinates."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.stack([(u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_centers(intr: Intrinsics, pixels) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.asarray(pixels)
    return pixels % intr.width + 0.5, pixels // intr.width + 0.5


def pixel_to_ray(intr: Intrinsics, pose: Pose, px) -> tuple[np.ndarray, np.ndarray]:
    """World ray through continuous pixel coordinate ``px = (x, y)``."""
    x, y = float(px[0]), float(px[1])
    if not (0.0 <= x < intr.width and 0.0 <= y < intr.height):
        raise ValueError(f"pixel {px} outside a {intr.width}x{intr.height} image")
    d = pose.rotation @ camera_directions(intr, x, y)
    return pose.translation.copy(), d


def rays_for_pixels(intr: Intrinsics, rotations, translations, pixels):
    """Ray origins and directions for pixel indices under one or many poses.

    ``rotations`` (..., 3, 3) and ``translations`` (..., 3) broadcast against
    ``pixels`` (..., R); outputs have shape (..., R, 3).
    """
    pixels = np.asarray(pixels)
    if pixels.size and (pixels.min() < 0 or pixels.max() >= intr.n_pixels):
        raise ValueError("pixel index out of range")
    u, v = pixel_centers(intr, pixels)
    d_cam = camera_directions(intr, u, v)
    rotations = np.asarray(rotations, dtype=float)
    d = np.einsum("...ij,...rj->...ri", rotations, d_cam)
    o = np.broadcast_to(np.asarray(translations, dtype=float)[..., None, :], d.shape).copy()
    return o, d


def project_points(intr: Intrinsics, pose: Pose, points) -> np.ndarray:
    """Continuous pixel coordinates (x, y) of world points in front of the camera."""
    p_cam = (np.asarray(points, dtype=float) - pose.translation) @ pose.rotation
    z = -p_cam[..., 2]
    x = intr.cx + intr.fx * p_cam[..., 0] / z
    y = intr.cy - intr.fy * p_cam[..., 1] / z
    return np.stack([x, y], axis=-1)


def stratified_samples(near, far, n_samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """One sample per equal-width bin of ``[near, far]``.

    With ``rng=None`` the bin midpoints are returned; otherwise each sample is
    uniform within its bin. ``near``/``far`` may be scalars or per-ray arrays.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    near = np.asarray(near, dtype=float)
    far = np.asarray(far, dtype=float)
    if np.any(near < 0) or np.any(far <= near):
        raise ValueError("require 0 <= near < far")
    shape = np.broadcast(near, far).shape + (n_samples,)
    if rng is None:
        u = np.broadcast_to(np.arange(n_samples) + 0.5, shape)
    else:
        u = np.arange(n_samples) + rng.random(shape)
    width = (far - near)[..., None] / n_samples
    return near[..., None] + width * u


def ray_box_interval(origins, directions, box_min, box_max, margin: float = NEAR_FAR_MARGIN):
    """Per-ray [near, far] from a slab test against an axis-aligned box.

    Rays that miss get the placeholder interval [0, 1]; nothing lives outside
    the box, so their samples see empty space.
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(directions, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (np.asarray(box_min) - o) * inv
        t1 = (np.asarray(box_max) - o) * inv
    lo = np.nanmax(np.minimum(t0, t1), axis=-1)
    hi = np.nanmin(np.maximum(t0, t1), axis=-1)
    pad = margin * (hi - lo)
    near = np.maximum(lo - pad, 0.0)
    far = hi + pad
    hit = (hi > lo) & (far > near) & (hi > 0)
    return np.where(hit, near, 0.0), np.where(hit, far, 1.0)


def sample_pixel_batch(intr: Intrinsics, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct pixel indices drawn uniformly without replacement."""
    if batch_size > intr.n_pixels:
        raise ValueError(f"batch of {batch_size} exceeds {intr.n_pixels} pixels")
    return rng.choice(intr.n_pixels, size=batch_size, replace=False)


def build_batch(intr: Intrinsics, pose: Pose, pixels, bounds, n_samples: int,
                rng: np.random.Generator | None = None) -> RaySampleBatch:
    """Rays for ``pixels`` under ``pose`` with samples inside the scene box."""
    pixels = np.asarray(pixels)
    o, d = rays_for_pixels(intr, pose.rotation, pose.translation, pixels)
    near, far = ray_box_interval(o, d, bounds[0], bounds[1])
    t = stratified_samples(near, far, n_samples, rng)
    return RaySampleBatch(pixels, o, d, t, near, far)


def full_image_batch(intr: Intrinsics, pose: Pose, bounds, n_samples: int) -> RaySampleBatch:
    return build_batch(intr, pose, np.arange(intr.n_pixels), bounds, n_samples)


GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def orbit_poses(n: int, radius: float, elevations_deg=(25.0, -10.0, 40.0, 5.0, 15.0), target=(0.0, 0.0, 0.0),
                azimuth0_deg: float = -42.7) -> list[Pose]:
    """``n`` cameras on a sphere around ``target``, all looking at it.

    Azimuths advance by the golden angle; elevations cycle through
    ``elevations_deg``. Deterministic.
    """
    poses = []
    for k in range(n):
        az = math.radians(azimuth0_deg) + k * GOLDEN_ANGLE
        el = math.radians(elevations_deg[k % len(elevations_deg)])
        eye = np.asarray(target, dtype=float) + radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        poses.append(Pose.look_at(eye, target))
    return poses
