"""Adam applied separately to the rotation and translation parts of a pose.

Translation moments live in R^3 and update the camera origin additively.
Rotation moments are plain so(3) vectors; each step turns the moment ratio
into a world-frame rotation about the camera origin, ``R <- exp(-delta) R``.
Moments are not transported when the orientation changes.

Everything here works on stacks of hypotheses: arrays carry a leading pool
axis, and :func:`adam_step` is the one-pose convenience wrapper.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .lie import REORTHONORMALIZE_EVERY, Pose, exp_so3, orthonormalize


@dataclass(frozen=True)
class OptimizerConfig:
    """Learning rates, their exponential decay, and Adam's constants.

    ``second_moment="coordinate"`` keeps one second moment per coordinate
    (textbook Adam). ``"subspace"`` keeps a single squared-norm moment per
    subspace, which rescales a subspace's step without bending its direction.
    """

    lr_translation: float = 3e-3
    lr_rotation: float = 5e-3
    decay_base: float = 0.33
    decay_step: float = 256.0
    staircase: bool = False
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    second_moment: str = "coordinate"

    def __post_init__(self):
        for name in ("lr_translation", "lr_rotation", "decay_base", "decay_step", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.second_moment not in ("coordinate", "subspace"):
            raise ValueError("second_moment must be 'coordinate' or 'subspace'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


def lr_at(config: OptimizerConfig, step: int) -> tuple[float, float]:
    """Translation and rotation learning rates at (0-based) ``step``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    exponent = step // config.decay_step if config.staircase else step / config.decay_step
    factor = config.decay_base ** exponent
    return config.lr_translation * factor, config.lr_rotation * factor


@dataclass
class AdamState:
    """Moments for a stack of hypotheses (leading axis = hypothesis)."""

    m_t: np.ndarray
    v_t: np.ndarray
    m_r: np.ndarray
    v_r: np.ndarray
    step_count: np.ndarray
    rot_updates: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rot_updates is None:
            self.rot_updates = np.zeros_like(self.step_count)

    @classmethod
    def zeros(cls, n: int = 1) -> "AdamState":
        z = np.zeros((n, 3))
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.step_count)

    def take(self, idx) -> "AdamState":
        return AdamState(self.m_t[idx], self.v_t[idx], self.m_r[idx], self.v_r[idx],
                         self.step_count[idx], self.rot_updates[idx])

    def put(self, idx, other: "AdamState") -> None:
        self.m_t[idx] = other.m_t
        self.v_t[idx] = other.v_t
        self.m_r[idx] = other.m_r
        self.v_r[idx] = other.v_r
        self.step_count[idx] = other.step_count
        self.rot_updates[idx] = other.rot_updates

    def reset(self, idx) -> None:
        for arr in (self.m_t, self.v_t, self.m_r, self.v_r, self.step_count, self.rot_updates):
            arr[idx] = 0

    def copy(self) -> "AdamState":
        return replace(self, **{k: getattr(self, k).copy() for k in
                                ("m_t", "v_t", "m_r", "v_r", "step_count", "rot_updates")})


def _moment_step(m, v, g, k, config: OptimizerConfig, lr):
    m = config.beta1 * m + (1.0 - config.beta1) * g
    sq = g * g
    if config.second_moment == "subspace":
        sq = np.broadcast_to(sq.sum(axis=-1, keepdims=True), g.shape)
    v = config.beta2 * v + (1.0 - config.beta2) * sq
    m_hat = m / (1.0 - config.beta1 ** k)[:, None]
    v_hat = v / (1.0 - config.beta2 ** k)[:, None]
    return m, v, lr * m_hat / (np.sqrt(v_hat) + config.eps)


def adam_step_batch(state: AdamState, rotations, translations, d_translation, d_rotation,
                    config: OptimizerConfig, step: int):
    """One update of every hypothesis in the stack.

    Returns new ``(rotations, translations, state)``; inputs are not modified.
    A zero gradient block leaves its subspace exactly unchanged.
    """
    lr_t, lr_r = lr_at(config, step)
    k = (state.step_count + 1).astype(float)
    m_t, v_t, delta_t = _moment_step(state.m_t, state.v_t, np.asarray(d_translation, float), k, config, lr_t)
    m_r, v_r, delta_r = _moment_step(state.m_r, state.v_r, np.asarray(d_rotation, float), k, config, lr_r)
    new_t = np.asarray(translations, dtype=float) - delta_t
    rotating = np.any(delta_r != 0.0, axis=-1)
    new_R = np.array(rotations, dtype=float)
    if np.any(rotating):
        new_R[rotating] = exp_so3(-delta_r[rotating]) @ new_R[rotating]
    rot_updates = state.rot_updates + rotating
    due = rotating & (rot_updates % REORTHONORMALIZE_EVERY == 0)
    if np.any(due):
        new_R[due] = orthonormalize(new_R[due])
    new_state = AdamState(m_t, v_t, m_r, v_r, state.step_count + 1, rot_updates)
    return new_R, new_t, new_state


def adam_step(state: AdamState, pose: Pose, grad, config: OptimizerConfig, step: int):
    """Single-pose form of :func:`adam_step_batch`; ``grad`` is a PoseGradient."""
    R, t, new_state = adam_step_batch(state, pose.rotation[None], pose.translation[None],
                                      np.asarray(grad.d_translation)[None], np.asarray(grad.d_rotation)[None],
                                      config, step)
    return Pose(R[0], t[0]), new_state
