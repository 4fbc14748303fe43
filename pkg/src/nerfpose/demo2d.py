"""Planar comparison of two pose parameterizations under Adam.

Both runs minimize the mean squared difference between the 3x3 homogeneous
matrices of the current and the target pose, with the same Adam applied to a
translation block and a rotation block. They differ only in how a step is
applied:

* ``"se2"``: the step is a twist ``(v, omega)`` applied through the SE(2)
  exponential, ``M <- exp(-step) M``. Translation and rotation are coupled.
* ``"so2xt2"``: the translation moves by ``-v`` and the angle by ``-omega``
  independently, so the position never feels the rotation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .lie import Pose2, exp_se2, rot2

PARAMETERIZATIONS = ("se2", "so2xt2")


@dataclass(frozen=True)
class Demo2dConfig:
    start: tuple = (0.0, 0.0, 0.0)  # x, y, theta (radians)
    target: tuple = (1.0, 0.5, math.pi / 2)
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    second_moment: str = "subspace"
    tolerance: float = 1e-4
    max_steps: int = 2000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.lr <= 0 or self.max_steps < 0:
            raise ValueError("lr must be positive and max_steps non-negative")
        if self.second_moment not in ("coordinate", "subspace"):
            raise ValueError("second_moment must be 'coordinate' or 'subspace'")
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))

    def start_pose(self) -> Pose2:
        return Pose2(self.start[2], self.start[:2])

    def target_pose(self) -> Pose2:
        return Pose2(self.target[2], self.target[:2])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Demo2dConfig":
        return cls(**d)


@dataclass
class DemoResult:
    parameterization: str
    poses: list  # Pose2 per step, index 0 = start
    mse: list
    steps_to_converge: int | None
    first_step: np.ndarray = field(default=None)  # translational tangent of the first update

    @property
    def converged(self) -> bool:
        return self.steps_to_converge is not None

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "x", "y", "theta", "mse"])
        for i, (p, e) in enumerate(zip(self.poses, self.mse)):
            w.writerow([i, repr(float(p.translation[0])), repr(float(p.translation[1])), repr(p.theta), repr(e)])
        return buf.getvalue()


def pose_mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def mse_gradients(M: np.ndarray, T: np.ndarray):
    """Gradients of the matrix MSE for both parameterizations.

    Returns ``(g_v, g_w)`` for a world-frame twist ``M <- exp(xi) M`` and
    ``(g_t, g_theta)`` for independent translation and angle.
    """
    E = (2.0 / 9.0) * (M - T)
    G = E @ M.T
    twist = (G[:2, 2].copy(), G[1, 0] - G[0, 1])
    dR = np.array([[0.0, -1.0], [1.0, 0.0]]) @ M[:2, :2]
    split = (E[:2, 2].copy(), float(np.sum(E[:2, :2] * dR)))
    return twist, split


class _Adam2:
    def __init__(self, cfg: Demo2dConfig):
        self.cfg = cfg
        self.m = [np.zeros(2), np.zeros(1)]
        self.v = [np.zeros(2), np.zeros(1)]
        self.k = 0

    def step(self, grads):
        c = self.cfg
        self.k += 1
        out = []
        for i, g in enumerate(grads):
            g = np.atleast_1d(np.asarray(g, dtype=float))
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            sq = np.full_like(g, g @ g) if c.second_moment == "subspace" else g * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * sq
            m_hat = self.m[i] / (1 - c.beta1 ** self.k)
            v_hat = self.v[i] / (1 - c.beta2 ** self.k)
            out.append(c.lr * m_hat / (np.sqrt(v_hat) + c.eps))
        return out[0], float(out[1][0])


def run_demo(cfg: Demo2dConfig, parameterization: str) -> DemoResult:
    """Optimize from ``cfg.start`` toward ``cfg.target``.

    ``steps_to_converge`` is the first step count after which the matrix MSE
    is below the tolerance (0 if the start already is), or None.
    """
    if parameterization not in PARAMETERIZATIONS:
        raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
    T = cfg.target_pose().matrix()
    M = cfg.start_pose().matrix()
    theta = cfg.start[2]
    adam = _Adam2(cfg)
    poses = [cfg.start_pose()]
    errors = [pose_mse(M, T)]
    converged = 0 if errors[0] < cfg.tolerance else None
    first = None
    step = 0
    while converged is None and step < cfg.max_steps:
        twist, split = mse_gradients(M, T)
        if parameterization == "se2":
            dv, dw = adam.step(twist)
            M = exp_se2(np.array([-dv[0], -dv[1], -dw])) @ M
            theta = math.atan2(M[1, 0], M[0, 0])
            if first is None:
                first = -dv
        else:
            dt, dth = adam.step(split)
            theta -= dth
            M = np.eye(3)
            M[:2, :2] = rot2(theta)
            M[:2, 2] = poses[-1].translation - dt
            if first is None:
                first = -dt
        step += 1
        poses.append(Pose2(theta, M[:2, 2]))
        errors.append(pose_mse(M, T))
        if errors[-1] < cfg.tolerance:
            converged = step
    return DemoResult(parameterization, poses, errors, converged, first)


def path_deviation(positions, a, b) -> float:
    """Largest distance of ``positions`` from the line through ``a`` and ``b``,
    relative to ``|b - a|``."""
    a = np.asarray(a, dtype=float)
    u = np.asarray(b, dtype=float) - a
    length = float(np.linalg.norm(u))
    rel = np.asarray(positions, dtype=float) - a
    cross = rel[:, 0] * u[1] - rel[:, 1] * u[0]
    return float(np.max(np.abs(cross)) / length ** 2)


def svg_plot(results, cfg: Demo2dConfig, size: int = 400) -> str:
    """Both translation paths, start and target, as a standalone SVG."""
    pts = np.concatenate([r.positions for r in results] + [np.array([cfg.start[:2], cfg.target[:2]])])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-9)
    pad = 0.1 * span
    lo = lo - pad
    scale = (size - 20) / (span + 2 * pad)

    def xy(p):
        return 10 + (p[0] - lo[0]) * scale, size - 10 - (p[1] - lo[1]) * scale

    colors = {"se2": "#d62728", "so2xt2": "#1f77b4"}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for r in results:
        path = " ".join("%.2f,%.2f" % xy(p) for p in r.positions)
        label = f"{r.parameterization}: {r.steps_to_converge if r.converged else 'not converged'}"
        out.append(f'<polyline fill="none" stroke="{colors.get(r.parameterization, "black")}" '
                   f'stroke-width="1.5" points="{path}"><title>{label}</title></polyline>')
    for p, c in ((cfg.start[:2], "black"), (cfg.target[:2], "green")):
        x, y = xy(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{c}"/>')
    y = 16
    for r in results:
        out.append(f'<text x="12" y="{y}" font-size="12" fill="{colors.get(r.parameterization, "black")}">'
                   f'{r.parameterization}: {r.steps_to_converge if r.converged else "not converged"} steps</text>')
        y += 14
    out.append("</svg>")
    return "\n".join(out) + "\n"


def ascii_plot(results, cfg: Demo2dConfig, width: int = 60, height: int = 24) -> str:
    """Character-grid sketch of the paths: ``s`` se2, ``o`` so2xt2, ``S``/``T``
    start and target."""
    pts = np.concatenate([r.positions for r in results] + [np.array([cfg.start[:2], cfg.target[:2]])])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    grid = [[" "] * width for _ in range(height)]

    def put(p, ch):
        c = int(round((p[0] - lo[0]) / span[0] * (width - 1)))
        r = height - 1 - int(round((p[1] - lo[1]) / span[1] * (height - 1)))
        grid[r][c] = ch

    marks = {"se2": "s", "so2xt2": "o"}
    for r in results:
        for p in r.positions:
            put(p, marks.get(r.parameterization, "*"))
    put(cfg.start[:2], "S")
    put(cfg.target[:2], "T")
    return "\n".join("".join(row).rstrip() for row in grid) + "\n"
