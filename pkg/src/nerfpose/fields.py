"""Density/color fields with spatial derivatives.

Two kinds of field are provided: :class:`AnalyticScene`, a handful of
soft-edged primitives with exact gradients, and :class:`VoxelGridField`, a
dense trilinear grid whose raw values can be trained. Colors do not depend on
viewing direction.

Every field exposes ``bounds`` (a ``(min_xyz, max_xyz)`` pair that contains
all non-zero density) and ``query(points, grad=True)`` returning a
:class:`FieldSample`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

# guards the density-weighted color mix where density fades to zero
COLOR_GUARD = 0.05

CHECKPOINT_MAGIC = b"NRFGRID1"
_HEADER = struct.Struct("<8s3I6d")
MAX_VOXELS = 1 << 28


@dataclass
class FieldSample:
    """Batched field values; derivative arrays are None when not requested.

    ``dcolor[n, ch, k]`` is the derivative of channel ``ch`` along axis ``k``.
    """

    sigma: np.ndarray
    color: np.ndarray
    dsigma: np.ndarray | None = None
    dcolor: np.ndarray | None = None


@numba.njit(cache=True, nogil=True)
def _quintic(x):
    if x <= 0.0:
        return 0.0, 0.0
    if x >= 1.0:
        return 1.0, 0.0
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0), 30.0 * x * x * (1.0 - x) * (1.0 - x)


@numba.njit(cache=True, nogil=True)
def _analytic_query(pts, prims, guard, grad, sigma, color, dsigma, dcolor):
    """Fused evaluation of the packed primitives (see AnalyticScene.packed)."""
    n_prim = prims.shape[0]
    ds = np.zeros((n_prim, 3))
    sk = np.zeros(n_prim)
    for n in range(pts.shape[0]):
        px, py, pz = pts[n, 0], pts[n, 1], pts[n, 2]
        total = 0.0
        wr = 0.0
        wg = 0.0
        wb = 0.0
        for m in range(n_prim):
            dx, dy, dz = px - prims[m, 1], py - prims[m, 2], pz - prims[m, 3]
            w = prims[m, 7]
            sk[m] = 0.0
            ds[m, 0] = 0.0
            ds[m, 1] = 0.0
            ds[m, 2] = 0.0
            if prims[m, 0] == 0.0:
                reach = prims[m, 4] + 0.5 * w
                r2 = dx * dx + dy * dy + dz * dz
                if r2 >= reach * reach:
                    continue
                r = np.sqrt(r2)
                s, dsr = _quintic((prims[m, 4] - r) / w + 0.5)
                if s == 0.0:
                    continue
                sk[m] = prims[m, 8] * s
                if grad and r > 0.0:
                    k = -prims[m, 8] * dsr / (w * r)
                    ds[m, 0] = k * dx
                    ds[m, 1] = k * dy
                    ds[m, 2] = k * dz
            else:
                ax, adx = _quintic((prims[m, 4] - abs(dx)) / w + 0.5)
                if ax == 0.0:
                    continue
                ay, ady = _quintic((prims[m, 5] - abs(dy)) / w + 0.5)
                if ay == 0.0:
                    continue
                az, adz = _quintic((prims[m, 6] - abs(dz)) / w + 0.5)
                if az == 0.0:
                    continue
                rho = prims[m, 8]
                sk[m] = rho * ax * ay * az
                if grad:
                    ds[m, 0] = -rho * adx * np.sign(dx) / w * ay * az
                    ds[m, 1] = -rho * ax * ady * np.sign(dy) / w * az
                    ds[m, 2] = -rho * ax * ay * adz * np.sign(dz) / w
            total += sk[m]
            wr += sk[m] * prims[m, 9]
            wg += sk[m] * prims[m, 10]
            wb += sk[m] * prims[m, 11]
        if total == 0.0:
            continue
        den = total + guard
        cr, cg, cb = wr / den, wg / den, wb / den
        sigma[n] = total
        color[n, 0] = cr
        color[n, 1] = cg
        color[n, 2] = cb
        if not grad:
            continue
        for m in range(n_prim):
            if sk[m] == 0.0 and ds[m, 0] == 0.0 and ds[m, 1] == 0.0 and ds[m, 2] == 0.0:
                continue
            er = (prims[m, 9] - cr) / den
            eg = (prims[m, 10] - cg) / den
            eb = (prims[m, 11] - cb) / den
            for d in range(3):
                g = ds[m, d]
                dsigma[n, d] += g
                dcolor[n, 0, d] += er * g
                dcolor[n, 1, d] += eg * g
                dcolor[n, 2, d] += eb * g


def _smootherstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0), 30.0 * x * x * (1.0 - x) ** 2


@dataclass(frozen=True)
class SoftSphere:
    """Ball with a quintic edge: full density inside ``radius - falloff/2``,
    none beyond ``radius + falloff/2``."""

    center: tuple
    radius: float
    color: tuple
    density: float = 40.0
    falloff: float = 0.1

    def __post_init__(self):
        if self.radius <= 0 or self.falloff <= 0 or self.density < 0:
            raise ValueError("sphere needs positive radius and falloff, non-negative density")

    @property
    def support(self):
        c = np.asarray(self.center, dtype=float)
        r = self.radius + 0.5 * self.falloff
        return c - r, c + r

    def profile(self, points):
        diff = points - np.asarray(self.center, dtype=float)
        r = np.sqrt(np.einsum("ni,ni->n", diff, diff))
        s, ds = _smootherstep((self.radius - r) / self.falloff + 0.5)
        # ds vanishes on the plateau, which covers r == 0
        scale = np.divide(-ds / self.falloff, r, out=np.zeros_like(r), where=r > 0)
        return s, scale[:, None] * diff

    def to_dict(self):
        return {"type": "sphere", "center": list(self.center), "radius": self.radius,
                "color": list(self.color), "density": self.density, "falloff": self.falloff}


@dataclass(frozen=True)
class SoftBox:
    """Axis-aligned box whose density is a product of per-axis quintic edges."""

    center: tuple
    half_size: tuple
    color: tuple
    density: float = 40.0
    falloff: float = 0.1

    def __post_init__(self):
        if self.falloff <= 0 or self.density < 0:
            raise ValueError("box needs positive falloff and non-negative density")
        if min(self.half_size) < 0.5 * self.falloff:
            raise ValueError("box half sizes must be at least falloff/2 to stay smooth")

    @property
    def support(self):
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.half_size, dtype=float) + 0.5 * self.falloff
        return c - h, c + h

    def profile(self, points):
        diff = points - np.asarray(self.center, dtype=float)
        x = (np.asarray(self.half_size) - np.abs(diff)) / self.falloff + 0.5
        s_axis, ds_axis = _smootherstep(x)
        ds_axis = ds_axis * (-np.sign(diff) / self.falloff)
        s = s_axis.prod(axis=1)
        grad = np.stack([
            ds_axis[:, 0] * s_axis[:, 1] * s_axis[:, 2],
            s_axis[:, 0] * ds_axis[:, 1] * s_axis[:, 2],
            s_axis[:, 0] * s_axis[:, 1] * ds_axis[:, 2],
        ], axis=1)
        return s, grad

    def to_dict(self):
        return {"type": "box", "center": list(self.center), "half_size": list(self.half_size),
                "color": list(self.color), "density": self.density, "falloff": self.falloff}


def primitive_from_dict(d: dict):
    kind = d.get("type")
    if kind == "sphere":
        return SoftSphere(tuple(d["center"]), float(d["radius"]), tuple(d["color"]),
                          float(d.get("density", 40.0)), float(d.get("falloff", 0.1)))
    if kind == "box":
        return SoftBox(tuple(d["center"]), tuple(d["half_size"]), tuple(d["color"]),
                       float(d.get("density", 40.0)), float(d.get("falloff", 0.1)))
    raise ValueError(f"unknown primitive type {kind!r}")


@dataclass(frozen=True)
class AnalyticScene:
    """Sum of soft primitives; color is the density-weighted primitive color.

    ``color = sum(sigma_k * c_k) / (sum(sigma_k) + COLOR_GUARD)``, so the field
    is smooth everywhere and black in empty space.
    """

    primitives: tuple = field(default_factory=tuple)

    @property
    def bounds(self):
        if not self.primitives:
            return np.full(3, -0.5), np.full(3, 0.5)
        lo = np.min([p.support[0] for p in self.primitives], axis=0)
        hi = np.max([p.support[1] for p in self.primitives], axis=0)
        return lo, hi

    def packed(self) -> np.ndarray:
        """Primitives as rows of ``_analytic_query`` parameters."""
        rows = []
        for p in self.primitives:
            size = (p.radius, 0.0, 0.0) if isinstance(p, SoftSphere) else tuple(p.half_size)
            kind = 0.0 if isinstance(p, SoftSphere) else 1.0
            rows.append((kind, *p.center, *size, p.falloff, p.density, *p.color))
        return np.array(rows, dtype=float).reshape(-1, 12)

    def query(self, points, grad: bool = True) -> FieldSample:
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        n = pts.shape[0]
        sigma = np.zeros(n)
        color = np.zeros((n, 3))
        dsigma = np.zeros((n, 3))
        dcolor = np.zeros((n, 3, 3))
        _analytic_query(pts, self._packed, COLOR_GUARD, grad, sigma, color, dsigma, dcolor)
        if not grad:
            return FieldSample(sigma, color)
        return FieldSample(sigma, color, dsigma, dcolor)

    @property
    def _packed(self) -> np.ndarray:
        cached = self.__dict__.get("_packed_cache")
        if cached is None:
            cached = self.packed()
            object.__setattr__(self, "_packed_cache", cached)
        return cached

    def to_dict(self):
        return {"primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        return cls(tuple(primitive_from_dict(p) for p in d.get("primitives", [])))


def reference_scene() -> AnalyticScene:
    """Seven wide soft spheres of distinct colors spread through the unit cube.

    The wide falloffs keep the photometric loss smooth over camera offsets
    of tens of degrees; the depth spread gives parallax.
    """
    centers = [(0.0, 0.0, 0.0), (0.42, -0.3, 0.1), (-0.4, 0.3, -0.15), (0.1, 0.42, 0.35),
               (-0.3, -0.38, 0.3), (0.35, 0.3, -0.35), (-0.2, -0.1, -0.45)]
    colors = [(0.9, 0.25, 0.2), (0.2, 0.8, 0.3), (0.2, 0.35, 0.95), (0.95, 0.85, 0.2),
              (0.9, 0.9, 0.9), (0.8, 0.3, 0.9), (0.2, 0.85, 0.85)]
    return AnalyticScene(tuple(SoftSphere(c, 0.2, col, density=15.0, falloff=0.3) for c, col in zip(centers, colors)))


def single_sphere_scene() -> AnalyticScene:
    return AnalyticScene((SoftSphere((0.0, 0.0, 0.0), 0.3, (0.85, 0.4, 0.2), density=30.0, falloff=0.15),))


@dataclass(frozen=True)
class RotatedField:
    """``base`` rigidly rotated about the world origin by ``rotation``."""

    base: object
    rotation: np.ndarray

    @property
    def bounds(self):
        lo, hi = self.base.bounds
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        rc = corners @ np.asarray(self.rotation).T
        return rc.min(axis=0), rc.max(axis=0)

    def query(self, points, grad: bool = True) -> FieldSample:
        Q = np.asarray(self.rotation, dtype=float)
        s = self.base.query(np.asarray(points, dtype=float).reshape(-1, 3) @ Q, grad)
        if not grad:
            return s
        return FieldSample(s.sigma, s.color, s.dsigma @ Q.T, s.dcolor @ Q.T)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # exp of a non-positive argument only, so both tails keep full relative precision
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class TrilinearStencil:
    """Corner indices and weights of trilinear lookups for a set of points."""

    index: np.ndarray  # (N, 8) flat voxel indices
    weight: np.ndarray  # (N, 8)
    dweight: np.ndarray  # (N, 8, 3) derivative of each weight w.r.t. the point
    inside: np.ndarray  # (N,) bool


class VoxelGridField:
    """Dense grid with one value per cell center, interpolated trilinearly.

    Raw values are interpolated first and then activated: density through
    softplus, color through a sigmoid. Between the outermost cell centers and
    the bounds the nearest value is held; outside the bounds the field is
    empty.
    """

    def __init__(self, raw_density, raw_color, bounds=((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))):
        raw_density = np.asarray(raw_density)
        raw_color = np.asarray(raw_color)
        if raw_density.ndim != 3 or min(raw_density.shape) < 2:
            raise ValueError("raw_density must be a 3D array with at least 2 cells per axis")
        if raw_color.shape != raw_density.shape + (3,):
            raise ValueError("raw_color must have shape resolution + (3,)")
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        if np.any(hi <= lo):
            raise ValueError("bounds must have max > min on every axis")
        self.raw_density = raw_density
        self.raw_color = raw_color
        self.bounds = (lo, hi)

    @property
    def resolution(self) -> tuple:
        return tuple(int(n) for n in self.raw_density.shape)

    @classmethod
    def constant(cls, resolution, density_raw=-4.0, color_raw=0.0, bounds=((-0.5,) * 3, (0.5,) * 3),
                 dtype=np.float64):
        res = tuple(int(n) for n in resolution)
        return cls(np.full(res, density_raw, dtype=dtype), np.full(res + (3,), color_raw, dtype=dtype), bounds)

    def cell_centers(self) -> np.ndarray:
        lo, hi = self.bounds
        axes = [lo[a] + (np.arange(n) + 0.5) * (hi[a] - lo[a]) / n for a, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def stencil(self, points) -> TrilinearStencil:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        lo, hi = self.bounds
        res = np.array(self.resolution)
        scale = res / (hi - lo)
        g = (pts - lo) * scale - 0.5
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        clamped = (g < 0) | (g > res - 1)
        g = np.clip(g, 0.0, res - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
        f = g - i0
        dfdp = np.where(clamped, 0.0, scale)
        n = pts.shape[0]
        index = np.empty((n, 8), dtype=np.int64)
        weight = np.empty((n, 8))
        dweight = np.empty((n, 8, 3))
        ny, nz = res[1], res[2]
        k = 0
        for bx in (0, 1):
            wx = f[:, 0] if bx else 1.0 - f[:, 0]
            dx = dfdp[:, 0] if bx else -dfdp[:, 0]
            for by in (0, 1):
                wy = f[:, 1] if by else 1.0 - f[:, 1]
                dy = dfdp[:, 1] if by else -dfdp[:, 1]
                for bz in (0, 1):
                    wz = f[:, 2] if bz else 1.0 - f[:, 2]
                    dz = dfdp[:, 2] if bz else -dfdp[:, 2]
                    index[:, k] = ((i0[:, 0] + bx) * ny + (i0[:, 1] + by)) * nz + (i0[:, 2] + bz)
                    weight[:, k] = wx * wy * wz
                    dweight[:, k, 0] = dx * wy * wz
                    dweight[:, k, 1] = wx * dy * wz
                    dweight[:, k, 2] = wx * wy * dz
                    k += 1
        weight[~inside] = 0.0
        dweight[~inside] = 0.0
        return TrilinearStencil(index, weight, dweight, inside)

    def interpolate_raw(self, st: TrilinearStencil, grad: bool = True):
        dens = self.raw_density.reshape(-1)[st.index].astype(float)
        col = self.raw_color.reshape(-1, 3)[st.index].astype(float)
        raw_s = np.einsum("nk,nk->n", st.weight, dens)
        raw_c = np.einsum("nk,nkc->nc", st.weight, col)
        if not grad:
            return raw_s, raw_c, None, None
        return raw_s, raw_c, np.einsum("nkd,nk->nd", st.dweight, dens), np.einsum("nkd,nkc->ncd", st.dweight, col)

    def query(self, points, grad: bool = True) -> FieldSample:
        st = self.stencil(points)
        raw_s, raw_c, draw_s, draw_c = self.interpolate_raw(st, grad)
        sigma = np.where(st.inside, softplus(raw_s), 0.0)
        color = np.where(st.inside[:, None], sigmoid(raw_c), 0.0)
        if not grad:
            return FieldSample(sigma, color)
        dsigma = sigmoid(raw_s)[:, None] * draw_s
        dcolor = (color * (1.0 - color))[:, :, None] * draw_c
        return FieldSample(sigma, color, dsigma, dcolor)


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DimensionOverflowError(CheckpointError):
    pass


def save_checkpoint(grid: VoxelGridField, path) -> None:
    """Write a grid as little-endian binary: magic, u32 resolution,
    f64 bounds, f32 raw densities, then f32 raw RGB interleaved per cell
    (C order over x, y, z)."""
    lo, hi = grid.bounds
    header = _HEADER.pack(CHECKPOINT_MAGIC, *grid.resolution, *lo, *hi)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.raw_density, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(grid.raw_color, dtype="<f4").tobytes())


def load_checkpoint(path) -> VoxelGridField:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a grid checkpoint")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    _, nx, ny, nz, *b = _HEADER.unpack_from(data)
    n = nx * ny * nz
    if min(nx, ny, nz) < 2 or n > MAX_VOXELS:
        raise DimensionOverflowError(f"{path}: unsupported resolution {nx}x{ny}x{nz}")
    need = _HEADER.size + 16 * n
    if len(data) < need:
        raise TruncatedCheckpointError(f"{path}: header declares {n} voxels, payload holds fewer")
    dens = np.frombuffer(data, dtype="<f4", count=n, offset=_HEADER.size).reshape(nx, ny, nz)
    col = np.frombuffer(data, dtype="<f4", count=3 * n, offset=_HEADER.size + 4 * n).reshape(nx, ny, nz, 3)
    return VoxelGridField(dens.astype(np.float32), col.astype(np.float32), (b[:3], b[3:]))
