"""Posed image datasets and fitting a voxel grid to them.

The grid is fit by Adam on its raw (pre-activation) values. Gradients reuse
the compositing backward pass and are scattered onto the grid through the
trilinear weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import Intrinsics, RaySampleBatch, ray_box_interval, rays_for_pixels, stratified_samples
from .fields import FieldSample, VoxelGridField, sigmoid, softplus
from .imageio import read_ppm, write_ppm
from .lie import Pose, rng_stream
from .losses import Loss, loss_value_and_grad
from .render import RenderedRays, composite, composite_backward, render_image

SPLITS = ("train", "test")


@dataclass
class Frame:
    image: np.ndarray
    pose: Pose
    split: str = "train"
    name: str = ""


@dataclass
class PosedDataset:
    """Images of one scene with known poses and train/test tags."""

    intrinsics: Intrinsics
    frames: list

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width, 3)
        for f in self.frames:
            if f.image.shape != shape:
                raise ValueError(f"frame {f.name!r} has shape {f.image.shape}, expected {shape}")
            if f.split not in SPLITS:
                raise ValueError(f"unknown split tag {f.split!r}")

    def split(self, tag: str) -> list:
        return [f for f in self.frames if f.split == tag]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")

    def save(self, directory, extra: dict | None = None) -> Path:
        """Write ``transforms.json`` and one PPM per frame."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        records = []
        for i, f in enumerate(self.frames):
            name = f.name or f"frame_{i:03d}.ppm"
            write_ppm(d / name, f.image)
            records.append({"file": name, "pose": [float(x) for x in f.pose.to_row()], "split": f.split})
        doc = {"intrinsics": self.intrinsics.to_dict(), "frames": records}
        if extra:
            doc.update(extra)
        path = d / "transforms.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "PosedDataset":
        d = Path(directory)
        doc = json.loads((d / "transforms.json").read_text())
        intr = Intrinsics.from_dict(doc["intrinsics"])
        frames = [Frame(read_ppm(d / r["file"]), Pose.from_row(r["pose"]), r.get("split", "train"), r["file"])
                  for r in doc["frames"]]
        return cls(intr, frames)


def split_counts(n_frames: int, test_fraction: float) -> tuple[int, int]:
    """Train and test counts; the train count is rounded up."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    # round before ceil so 24 * 0.8 = 19.200000000000003 does not matter
    n_train = math.ceil(round(n_frames * (1.0 - test_fraction), 9))
    return n_train, n_frames - n_train


def split_tags(n_frames: int, test_fraction: float) -> list[str]:
    """Test frames spread evenly through the sequence."""
    _, n_test = split_counts(n_frames, test_fraction)
    return ["test" if (k + 1) * n_test // n_frames > k * n_test // n_frames else "train" for k in range(n_frames)]


def render_dataset(scene, intr: Intrinsics, poses, splits=None, n_samples: int = 64) -> PosedDataset:
    """Full-image renders with midpoint samples, one frame per pose."""
    poses = list(poses)
    splits = ["train"] * len(poses) if splits is None else list(splits)
    if len(splits) != len(poses):
        raise ValueError("one split tag per pose required")
    frames = [Frame(render_image(scene, intr, p, n_samples), p, s, f"frame_{i:03d}.ppm")
              for i, (p, s) in enumerate(zip(poses, splits))]
    return PosedDataset(intr, frames)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def dataset_psnr(field_, dataset: PosedDataset, frames=None, n_samples: int = 64) -> float:
    """PSNR of the pooled squared error over ``frames`` (default: test split,
    or every frame when there is no test split)."""
    frames = frames if frames is not None else (dataset.test or dataset.frames)
    errs = [np.mean((render_image(field_, dataset.intrinsics, f.pose, n_samples) - f.image) ** 2) for f in frames]
    mse = float(np.mean(errs))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    rays_per_iter: int = 1024
    learning_rate: float = 0.1
    n_samples: int = 64
    tv_weight: float = 1e-4
    loss: str = "l2"
    init_density: float = -4.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_iter < 1 or self.n_samples < 1:
            raise ValueError("iteration, ray and sample counts must be positive")
        if self.learning_rate <= 0 or self.tv_weight < 0:
            raise ValueError("learning_rate must be positive and tv_weight non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    field: VoxelGridField
    losses: list = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    pass


def tv_penalty(raw_density, weight: float):
    """``weight`` times the squared neighbour differences summed over all
    three axes, divided by the voxel count; returns value and gradient."""
    x = np.asarray(raw_density, dtype=float)
    grad = np.zeros_like(x)
    value = 0.0
    scale = weight / x.size
    for axis in range(3):
        d = np.diff(x, axis=axis)
        value += scale * float(np.sum(d * d))
        g = 2.0 * scale * d
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        grad[tuple(hi)] += g
        grad[tuple(lo)] -= g
    return value, grad


def grid_loss_and_grad(grid: VoxelGridField, batch: RaySampleBatch, target_rgb, loss="l2", tv_weight: float = 0.0):
    """Mean ray loss (plus TV) and its gradient w.r.t. the raw grid values.

    Returns ``(value, d_raw_density, d_raw_color)`` with the grid's shapes.
    """
    n, k = batch.t.shape
    st = grid.stencil(batch.points.reshape(-1, 3))
    raw_s, raw_c, _, _ = grid.interpolate_raw(st, grad=False)
    inside = st.inside
    sigma = np.where(inside, softplus(raw_s), 0.0)
    color = np.where(inside[:, None], sigmoid(raw_c), 0.0)
    deltas = batch.deltas
    rgb, trans, alpha, weights = composite(sigma.reshape(n, k), color.reshape(n, k, 3), deltas)
    values, dL_dC = loss_value_and_grad(loss, rgb, target_rgb)
    rendered = RenderedRays(rgb, trans, alpha, weights, deltas,
                            FieldSample(sigma.reshape(n, k), color.reshape(n, k, 3)), batch)
    dL_dsigma, dL_dcolor = composite_backward(rendered, dL_dC / n)
    g_s = dL_dsigma.reshape(-1) * np.where(inside, sigmoid(raw_s), 0.0)
    g_c = dL_dcolor.reshape(-1, 3) * color * (1.0 - color)
    n_vox = grid.raw_density.size
    idx = st.index.reshape(-1)
    d_density = np.bincount(idx, weights=(st.weight * g_s[:, None]).reshape(-1), minlength=n_vox)
    wc = st.weight[:, :, None] * g_c[:, None, :]
    d_color = np.stack([np.bincount(idx, weights=wc[:, :, c].reshape(-1), minlength=n_vox) for c in range(3)],
                       axis=-1)
    value = float(values.mean())
    d_density = d_density.reshape(grid.raw_density.shape)
    if tv_weight > 0:
        tv, g_tv = tv_penalty(grid.raw_density, tv_weight)
        value += tv
        d_density = d_density + g_tv
    return value, d_density, d_color.reshape(grid.raw_color.shape)


def _dataset_rays(dataset: PosedDataset, frames, bounds):
    intr = dataset.intrinsics
    pix = np.arange(intr.n_pixels)
    o = np.concatenate([rays_for_pixels(intr, f.pose.rotation, f.pose.translation, pix)[0] for f in frames])
    d = np.concatenate([rays_for_pixels(intr, f.pose.rotation, f.pose.translation, pix)[1] for f in frames])
    rgb = np.concatenate([f.image.reshape(-1, 3) for f in frames])
    near, far = ray_box_interval(o, d, *bounds)
    return o, d, rgb, near, far


def train_field(dataset: PosedDataset, resolution=(64, 64, 64), cfg: TrainConfig | None = None,
                bounds=((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5)), log=None, log_every: int = 250) -> TrainResult:
    """Fit a voxel grid to the training frames.

    The returned grid holds float32 values, exactly what a checkpoint stores.
    """
    cfg = cfg or TrainConfig()
    frames = dataset.train
    if len(frames) < 2:
        raise ValueError("training needs at least two training frames")
    if isinstance(resolution, int):
        resolution = (resolution,) * 3
    grid = VoxelGridField.constant(resolution, cfg.init_density, 0.0, bounds)
    o, d, rgb, near, far = _dataset_rays(dataset, frames, grid.bounds)
    n_rays = len(o)
    rng = rng_stream(cfg.seed)
    m = [np.zeros_like(grid.raw_density), np.zeros_like(grid.raw_color)]
    v = [np.zeros_like(grid.raw_density), np.zeros_like(grid.raw_color)]
    params = [grid.raw_density, grid.raw_color]
    loss = Loss(cfg.loss)
    history = []
    for it in range(cfg.iterations):
        sel = rng.choice(n_rays, size=min(cfg.rays_per_iter, n_rays), replace=False)
        t = stratified_samples(near[sel], far[sel], cfg.n_samples, rng if cfg.jitter else None)
        batch = RaySampleBatch(sel, o[sel], d[sel], t, near[sel], far[sel])
        value, g_dens, g_col = grid_loss_and_grad(grid, batch, rgb[sel], loss, cfg.tv_weight)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite training loss at iteration {it}")
        history.append(value)
        k = it + 1
        for p, g, mm, vv in zip(params, (g_dens, g_col), m, v):
            mm *= cfg.beta1
            mm += (1.0 - cfg.beta1) * g
            vv *= cfg.beta2
            vv += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (mm / (1.0 - cfg.beta1 ** k)) / (np.sqrt(vv / (1.0 - cfg.beta2 ** k)) + cfg.eps)
        if log is not None and (k % log_every == 0 or k == cfg.iterations):
            log(f"iteration {k}: loss {value:.6f}")
    final = VoxelGridField(grid.raw_density.astype(np.float32), grid.raw_color.astype(np.float32), grid.bounds)
    return TrainResult(final, history)
