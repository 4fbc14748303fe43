"""Per-pixel RGB losses with their derivatives, and observation corruption."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np


class LossKind(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    LOG_L1 = "log_l1"
    RELATIVE_L2 = "relative_l2"
    MAPE = "mape"
    SMAPE = "smape"
    SMOOTH_L1 = "smooth_l1"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"logl1": "log_l1", "relativel2": "relative_l2", "rel_l2": "relative_l2",
                   "smoothl1": "smooth_l1", "huber": "smooth_l1"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class Loss:
    """A pixel loss and its constants.

    ``beta`` is the Smooth L1 switch point; ``epsilon`` guards the
    denominators of the relative losses.
    """

    kind: LossKind = LossKind.L2
    beta: float = 0.1
    epsilon: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind.parse(self.kind))
        if self.beta <= 0 or self.epsilon <= 0:
            raise ValueError("beta and epsilon must be positive")

    def __call__(self, predicted, target, reference=None):
        return loss_value_and_grad(self, predicted, target, reference)


def loss_value_and_grad(loss, predicted, target, reference=None):
    """Per-pixel loss summed over channels, and its derivative.

    Parameters
    ----------
    loss : Loss or LossKind or str
    predicted, target : array_like, shape (..., 3)
    reference : array_like, optional
        Stand-in for the prediction inside denominators (Relative L2 and
        sMAPE). Those denominators are treated as constants, so the returned
        gradient is exact for a loss whose ``reference`` is held fixed.
        Defaults to ``predicted``.

    Returns
    -------
    value : ndarray, shape (...)
    grad : ndarray, shape (..., 3)
        Derivative of ``value`` with respect to ``predicted``.
    """
    if not isinstance(loss, Loss):
        loss = Loss(loss)
    yhat = np.asarray(predicted, dtype=float)
    y = np.asarray(target, dtype=float)
    ref = yhat if reference is None else np.asarray(reference, dtype=float)
    e = yhat - y
    a = np.abs(e)
    sgn = np.sign(e)
    eps, beta = loss.epsilon, loss.beta
    kind = loss.kind
    if kind is LossKind.L1:
        v, g = a, sgn
    elif kind is LossKind.L2:
        v, g = e * e, 2.0 * e
    elif kind is LossKind.LOG_L1:
        v, g = np.log1p(a), sgn / (1.0 + a)
    elif kind is LossKind.RELATIVE_L2:
        den = ref * ref + eps
        v, g = e * e / den, 2.0 * e / den
    elif kind is LossKind.MAPE:
        den = np.abs(y) + eps
        v, g = a / den, sgn / den
    elif kind is LossKind.SMAPE:
        den = np.abs(ref) + np.abs(y) + eps
        v, g = 2.0 * a / den, 2.0 * sgn / den
    elif kind is LossKind.SMOOTH_L1:
        quad = a < beta
        v = np.where(quad, 0.5 * e * e / beta, a - 0.5 * beta)
        g = np.where(quad, e / beta, sgn)
    else:  # pragma: no cover
        raise ValueError(kind)
    return v.sum(axis=-1), g


ALL_LOSSES = tuple(LossKind)


@dataclass(frozen=True)
class CorruptionSpec:
    gaussian_sigma: float = 0.0
    poisson_scale: float = 0.0
    brightness_delta: float = 0.0
    missing_fraction: float = 0.0

    def __post_init__(self):
        if self.gaussian_sigma < 0 or self.poisson_scale < 0:
            raise ValueError("noise levels must be non-negative")
        if not -1.0 <= self.brightness_delta <= 1.0:
            raise ValueError("brightness_delta must lie in [-1, 1]")
        if not 0.0 <= self.missing_fraction <= 1.0:
            raise ValueError("missing_fraction must lie in [0, 1]")

    @classmethod
    def benchmark_default(cls) -> "CorruptionSpec":
        return cls(gaussian_sigma=0.05, poisson_scale=100.0, brightness_delta=0.1, missing_fraction=0.1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(**{k: float(d[k]) for k in ("gaussian_sigma", "poisson_scale", "brightness_delta",
                                                  "missing_fraction") if k in d})


def corrupt_image(image, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt an (H, W, 3) image in [0, 1].

    Applied in order: additive Gaussian noise, Poisson shot noise at
    ``poisson_scale`` photons per unit intensity, a uniform brightness offset,
    then a random ``missing_fraction`` of pixels set to black. The result is
    clamped to [0, 1].
    """
    img = np.array(image, dtype=float)
    if spec.gaussian_sigma > 0:
        img = img + rng.normal(0.0, spec.gaussian_sigma, size=img.shape)
    if spec.poisson_scale > 0:
        s = spec.poisson_scale
        img = rng.poisson(np.clip(img, 0.0, None) * s) / s
    if spec.brightness_delta != 0:
        img = img + spec.brightness_delta
    if spec.missing_fraction > 0:
        h, w = img.shape[:2]
        n_missing = int(round(spec.missing_fraction * h * w))
        idx = rng.choice(h * w, size=n_missing, replace=False)
        flat = img.reshape(h * w, -1)
        flat[idx] = 0.0
        img = flat.reshape(img.shape)
    return np.clip(img, 0.0, 1.0)
