"""Volume rendering of ray batches and the backward pass to pose gradients.

The backward pass is written out by hand: one reverse (suffix) sum per ray
gives the derivative of the composited color with respect to every sample's
density, and the field's spatial derivatives carry that to the sample
positions. Sample distances along the rays are constants of a step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import Intrinsics, RaySampleBatch, build_batch, full_image_batch
from .fields import FieldSample
from .lie import Pose
from .losses import Loss, loss_value_and_grad


@dataclass
class RenderedRays:
    color: np.ndarray  # (N, 3)
    transmittance: np.ndarray  # (N, K), T_1 = 1
    alpha: np.ndarray  # (N, K)
    weights: np.ndarray  # (N, K), T_i * alpha_i
    deltas: np.ndarray  # (N, K)
    samples: FieldSample  # arrays shaped (N, K, ...)
    batch: RaySampleBatch

    @property
    def transmittance_after(self) -> np.ndarray:
        """T_{i+1} = T_i * exp(-sigma_i * delta_i)."""
        return self.transmittance * (1.0 - self.alpha)


@dataclass
class PoseGradient:
    """Loss gradient split into a force on the camera origin and a torque
    about it (an so(3) vector in world coordinates)."""

    d_translation: np.ndarray
    d_rotation: np.ndarray
    ray_count: int

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_translation, self.d_rotation])


@numba.njit(cache=True, nogil=True)
def _composite_kernel(sigma, color, deltas, rgb, trans, alpha, weights):
    n, k = sigma.shape
    for r in range(n):
        T = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for i in range(k):
            tau = sigma[r, i] * deltas[r, i]
            a = -np.expm1(-tau)
            w = T * a
            trans[r, i] = T
            alpha[r, i] = a
            weights[r, i] = w
            cr += w * color[r, i, 0]
            cg += w * color[r, i, 1]
            cb += w * color[r, i, 2]
            T *= np.exp(-tau)
        rgb[r, 0] = cr
        rgb[r, 1] = cg
        rgb[r, 2] = cb


def composite(sigma, color, deltas):
    """Alpha compositing of (N, K) densities and (N, K, 3) colors.

    Returns the composited colors with the per-sample transmittance, alpha and
    weights ``T_i * alpha_i``.
    """
    sigma = np.ascontiguousarray(sigma, dtype=float)
    color = np.ascontiguousarray(color, dtype=float)
    deltas = np.ascontiguousarray(deltas, dtype=float)
    n, k = sigma.shape
    rgb = np.empty((n, 3))
    trans = np.empty((n, k))
    alpha = np.empty((n, k))
    weights = np.empty((n, k))
    _composite_kernel(sigma, color, deltas, rgb, trans, alpha, weights)
    return rgb, trans, alpha, weights


def render_rays(field, batch: RaySampleBatch, grad: bool = True) -> RenderedRays:
    n, k = batch.t.shape
    s = field.query(batch.points.reshape(-1, 3), grad=grad)
    samples = FieldSample(
        s.sigma.reshape(n, k),
        s.color.reshape(n, k, 3),
        None if s.dsigma is None else s.dsigma.reshape(n, k, 3),
        None if s.dcolor is None else s.dcolor.reshape(n, k, 3, 3),
    )
    deltas = batch.deltas
    rgb, trans, alpha, weights = composite(samples.sigma, samples.color, deltas)
    return RenderedRays(np.clip(rgb, 0.0, 1.0), trans, alpha, weights, deltas, samples, batch)


@numba.njit(cache=True, nogil=True)
def _backward_kernel(g, color, trans, alpha, weights, deltas, dsigma, dcolor, dL_dsigma, dL_dp):
    n, k = weights.shape
    for r in range(n):
        g0, g1, g2 = g[r, 0], g[r, 1], g[r, 2]
        suffix = 0.0
        for i in range(k - 1, -1, -1):
            cg = color[r, i, 0] * g0 + color[r, i, 1] * g1 + color[r, i, 2] * g2
            ds = deltas[r, i] * (trans[r, i] * (1.0 - alpha[r, i]) * cg - suffix)
            suffix += weights[r, i] * cg
            dL_dsigma[r, i] = ds
            if dL_dp.shape[0] == 0:
                continue
            w = weights[r, i]
            for d in range(3):
                dL_dp[r, i, d] = ds * dsigma[r, i, d] + w * (
                    g0 * dcolor[r, i, 0, d] + g1 * dcolor[r, i, 1, d] + g2 * dcolor[r, i, 2, d])


def composite_backward(rendered: RenderedRays, dL_dC):
    """Derivatives of the loss with respect to each sample's density and color.

    ``dC/dc_i = T_i alpha_i`` per channel and
    ``dC/dsigma_i = delta_i (T_{i+1} c_i - sum_{j>i} T_j alpha_j c_j)``;
    the suffix sum is accumulated in one reverse sweep per ray.
    """
    g = np.ascontiguousarray(dL_dC, dtype=float)
    n, k = rendered.weights.shape
    dL_dsigma = np.empty((n, k))
    s = rendered.samples
    _backward_kernel(g, s.color, rendered.transmittance, rendered.alpha, rendered.weights, rendered.deltas,
                     np.zeros((1, 1, 3)), np.zeros((1, 1, 3, 3)), dL_dsigma, np.zeros((0, 1, 3)))
    dL_dcolor = rendered.weights[..., None] * g[:, None, :]
    return dL_dsigma, dL_dcolor


def backprop_point_gradients(rendered: RenderedRays, dL_dC) -> np.ndarray:
    """Per-sample ``dL/dp_i``, shape (N, K, 3)."""
    g = np.ascontiguousarray(dL_dC, dtype=float)
    n, k = rendered.weights.shape
    s = rendered.samples
    dL_dsigma = np.empty((n, k))
    dL_dp = np.empty((n, k, 3))
    _backward_kernel(g, s.color, rendered.transmittance, rendered.alpha, rendered.weights, rendered.deltas,
                     np.ascontiguousarray(s.dsigma), np.ascontiguousarray(s.dcolor), dL_dsigma, dL_dp)
    return dL_dp


def ray_pose_terms(batch: RaySampleBatch, point_grads):
    """Per-ray force ``sum_i dL/dp_i`` and torque ``sum_i t_i d x dL/dp_i``."""
    force = point_grads.sum(axis=1)
    moment = np.einsum("nk,nkd->nd", batch.t, point_grads)
    return force, np.cross(batch.directions, moment)


def aggregate_pose_gradient(batch: RaySampleBatch, point_grads) -> PoseGradient:
    force, torque = ray_pose_terms(batch, point_grads)
    n = batch.n_rays
    return PoseGradient(force.mean(axis=0), torque.mean(axis=0), n)


def loss_and_pose_gradient(field, batch: RaySampleBatch, target_rgb, loss: Loss, reference=None):
    """Mean per-pixel loss over the batch and its pose gradient.

    ``reference`` fixes the prediction used inside relative-loss
    denominators; by default the current render is used.
    """
    rendered = render_rays(field, batch)
    values, dL_dC = loss_value_and_grad(loss, rendered.color, target_rgb, reference)
    point_grads = backprop_point_gradients(rendered, dL_dC)
    return float(values.mean()), aggregate_pose_gradient(batch, point_grads), rendered


def render_image(field, intr: Intrinsics, pose: Pose, n_samples: int = 64) -> np.ndarray:
    """Full (H, W, 3) render with midpoint samples inside the field bounds."""
    batch = full_image_batch(intr, pose, field.bounds, n_samples)
    out = np.empty((intr.n_pixels, 3))
    chunk = 8192
    for start in range(0, intr.n_pixels, chunk):
        sub = batch.subset(slice(start, start + chunk))
        out[start:start + chunk] = render_rays(field, sub, grad=False).color
    return out.reshape(intr.height, intr.width, 3)


def image_loss(field, intr: Intrinsics, pose: Pose, target_image, loss: Loss, pixels=None,
               n_samples: int = 64) -> float:
    """Mean loss of a render against ``target_image`` over ``pixels`` (all by default)."""
    if pixels is None:
        pixels = np.arange(intr.n_pixels)
    batch = build_batch(intr, pose, pixels, field.bounds, n_samples)
    rendered = render_rays(field, batch, grad=False)
    target = np.asarray(target_image, dtype=float).reshape(-1, 3)[batch.pixels]
    values, _ = loss_value_and_grad(loss, rendered.color, target)
    return float(values.mean())
