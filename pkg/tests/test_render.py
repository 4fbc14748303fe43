import numpy as np
import pytest

from nerfpose.camera import Intrinsics, RaySampleBatch
from nerfpose.fields import AnalyticScene, FieldSample, RotatedField, SoftSphere, VoxelGridField, reference_scene
from nerfpose.lie import Pose, exp_so3
from nerfpose.losses import ALL_LOSSES, Loss
from nerfpose.render import (
    RenderedRays,
    aggregate_pose_gradient,
    backprop_point_gradients,
    composite,
    composite_backward,
    image_loss,
    loss_and_pose_gradient,
    render_image,
    render_rays,
)

from oracles import fd_pose_gradient, full_batch, hand_composite, random_view_pair, relative_error, smooth_ray_mask

SCENE = reference_scene()
INTR = Intrinsics.from_fov(24, 24, 60.0)


class ConstantField:
    """Uniform density and color inside a box."""

    def __init__(self, sigma, color, half=1.0):
        self.sigma, self.color = sigma, np.asarray(color, float)
        self.bounds = (np.full(3, -half), np.full(3, half))

    def query(self, points, grad=True):
        n = len(np.asarray(points).reshape(-1, 3))
        return FieldSample(np.full(n, float(self.sigma)), np.tile(self.color, (n, 1)),
                           np.zeros((n, 3)), np.zeros((n, 3, 3)))


def one_ray(t, far, d=(0.0, 0.0, -1.0)):
    t = np.atleast_2d(np.asarray(t, float))
    return RaySampleBatch(np.array([0]), np.zeros((1, 3)), np.array([d], float), t,
                          np.array([t[0, 0]]), np.array([far], float))


def test_two_sample_ray_by_hand():
    sigma = np.array([[2.0, 5.0]])
    color = np.array([[[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]]])
    delta = np.array([[0.3, 0.2]])
    rgb, T, alpha, w = composite(sigma, color, delta)
    a1, a2 = 1 - np.exp(-0.6), 1 - np.exp(-1.0)
    expected = a1 * color[0, 0] + (1 - a1) * a2 * color[0, 1]
    np.testing.assert_allclose(rgb[0], expected, rtol=1e-14)
    np.testing.assert_allclose(T[0], [1.0, 1 - a1], rtol=1e-14)
    np.testing.assert_allclose(w[0], [a1, (1 - a1) * a2], rtol=1e-14)


def test_composite_matches_textbook_loop():
    rng = np.random.default_rng(0)
    sigma = rng.uniform(0, 10, (20, 16))
    color = rng.uniform(0, 1, (20, 16, 3))
    delta = rng.uniform(0.01, 0.1, (20, 16))
    rgb, *_ = composite(sigma, color, delta)
    for r in range(20):
        np.testing.assert_allclose(rgb[r], hand_composite(sigma[r], color[r], delta[r]), rtol=1e-12)


def test_vacuum_renders_black():
    batch = full_batch(ConstantField(0.0, (1, 1, 1)), INTR, Pose.look_at((0, -0.5, 0.2)), 16)
    r = render_rays(ConstantField(0.0, (1, 1, 1)), batch)
    assert not r.color.any()
    assert np.all(r.transmittance == 1.0)


def test_opaque_slab_saturates_to_its_color():
    r = render_rays(ConstantField(1e4, (0.3, 0.6, 0.9)), one_ray([[0.1, 0.2, 0.3]], 0.4))
    np.testing.assert_allclose(r.color[0], [0.3, 0.6, 0.9], rtol=1e-12)


def test_transmittance_invariants():
    lo, hi = random_view_pair(3)
    batch = full_batch(SCENE, INTR, hi, 32)
    r = render_rays(SCENE, batch)
    assert np.all(r.transmittance[:, 0] == 1.0)
    np.testing.assert_allclose(r.transmittance[:, 1:], r.transmittance_after[:, :-1], rtol=1e-12)
    assert np.all(np.diff(r.transmittance, axis=1) <= 0)
    assert np.all((r.transmittance >= 0) & (r.transmittance <= 1))
    assert np.all((r.color >= 0) & (r.color <= 1))


def test_last_interval_ends_at_far():
    batch = one_ray([[0.5, 1.0, 1.5]], 2.25)
    np.testing.assert_allclose(batch.deltas, [[0.5, 0.5, 0.75]])


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    sigma = rng.uniform(0, 8, (5, 12))
    color = rng.uniform(0, 1, (5, 12, 3))
    delta = rng.uniform(0.02, 0.1, (5, 12))
    g = rng.normal(size=(5, 3))
    rgb, T, alpha, w = composite(sigma, color, delta)
    dummy = RaySampleBatch(np.arange(5), np.zeros((5, 3)), np.zeros((5, 3)), np.zeros((5, 12)), np.zeros(5), np.ones(5))
    rendered = RenderedRays(rgb, T, alpha, w, delta, FieldSample(sigma, color), dummy)
    d_sigma, d_color = composite_backward(rendered, g)
    h = 1e-6
    for i in range(12):
        sp, sm = sigma.copy(), sigma.copy()
        sp[:, i] += h
        sm[:, i] -= h
        fd = ((composite(sp, color, delta)[0] - composite(sm, color, delta)[0]) * g).sum(axis=1) / (2 * h)
        np.testing.assert_allclose(d_sigma[:, i], fd, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(d_color, w[..., None] * g[:, None, :], rtol=1e-15)


def test_zero_loss_gradient_gives_zero_point_gradients():
    _, pose = random_view_pair(4)
    batch = full_batch(SCENE, INTR, pose, 16)
    r = render_rays(SCENE, batch)
    assert not backprop_point_gradients(r, np.zeros((batch.n_rays, 3))).any()


def test_vacuum_gives_zero_point_gradients():
    field = ConstantField(0.0, (0.5, 0.5, 0.5))
    batch = full_batch(field, INTR, Pose.look_at((0, -0.5, 0.2)), 8)
    r = render_rays(field, batch)
    g = np.random.default_rng(2).normal(size=(batch.n_rays, 3))
    assert not backprop_point_gradients(r, g).any()


def test_aggregate_single_sample_force():
    batch = one_ray([[2.0]], 3.0, d=(0.0, 0.0, 1.0))
    g = aggregate_pose_gradient(batch, np.array([[[1.0, 0.0, 0.0]]]))
    np.testing.assert_array_equal(g.d_translation, [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(g.d_rotation, [0.0, 2.0, 0.0])
    assert g.ray_count == 1


def test_aggregate_is_a_mean_over_rays():
    rng = np.random.default_rng(3)
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t = np.sort(rng.uniform(0.5, 2.0, (4, 5)), axis=1)
    batch = RaySampleBatch(np.arange(4), rng.normal(size=(4, 3)), d, t, t[:, 0], t[:, -1] + 0.1)
    pg = rng.normal(size=(4, 5, 3))
    g = aggregate_pose_gradient(batch, pg)
    force = sum(pg[r, i] for r in range(4) for i in range(5)) / 4
    torque = sum(t[r, i] * np.cross(d[r], pg[r, i]) for r in range(4) for i in range(5)) / 4
    np.testing.assert_allclose(g.d_translation, force, rtol=1e-12)
    np.testing.assert_allclose(g.d_rotation, torque, rtol=1e-12)


@pytest.mark.parametrize("kind", [k.value for k in ALL_LOSSES])
def test_pose_gradient_matches_finite_differences(kind):
    loss = Loss(kind)
    for seed in range(5):
        gt, start = random_view_pair(seed)
        target = render_image(SCENE, INTR, gt, 32).reshape(-1, 3)
        batch = full_batch(SCENE, INTR, start, 32)
        keep = smooth_ray_mask(SCENE, batch, target, loss)
        assert keep.mean() > 0.98
        _, g, _ = loss_and_pose_gradient(SCENE, batch.subset(keep), target[keep], loss)
        ft, fr = fd_pose_gradient(SCENE, batch, target, loss, pixel_mask=keep)
        assert relative_error(g.d_translation, ft) < 1e-3
        assert relative_error(g.d_rotation, fr) < 1e-3


def test_point_gradients_match_directional_derivative():
    gt, start = random_view_pair(7)
    target = render_image(SCENE, INTR, gt, 32).reshape(-1, 3)
    batch = full_batch(SCENE, INTR, start, 32)
    loss = Loss("l2")
    _, g, _ = loss_and_pose_gradient(SCENE, batch, target, loss)
    v_t, v_r = np.array([0.3, -0.5, 0.2]), np.array([-0.1, 0.4, 0.7])
    analytic = g.d_translation @ v_t + g.d_rotation @ v_r
    from oracles import batch_loss, moved_batch

    ref = render_rays(SCENE, batch, grad=False).color
    h = 1e-4
    f = lambda s: batch_loss(SCENE, moved_batch(batch, dt=s * v_t, dw=s * v_r), target, loss, ref)  # noqa: E731
    fd = (f(h) - f(-h)) / (2 * h)
    assert abs(analytic - fd) / abs(fd) < 1e-3


def scene_sampled_grid(res=32):
    """Grid holding the reference scene at its cell centers, like a trained field."""
    g0 = VoxelGridField.constant((res,) * 3, bounds=((-0.8,) * 3, (0.8,) * 3))
    s = SCENE.query(g0.cell_centers().reshape(-1, 3), grad=False)
    dens = np.log(np.expm1(np.maximum(s.sigma, 1e-3)))
    c = np.clip(s.color, 0.02, 0.98)
    return VoxelGridField(dens.reshape((res,) * 3), np.log(c / (1 - c)).reshape((res,) * 3 + (3,)), g0.bounds)


def test_grid_field_pose_gradient_exact_at_tiny_steps():
    # rough random grid; steps small enough that no sample crosses a trilinear kink
    rng = np.random.default_rng(5)
    res = (12, 12, 12)
    grid = VoxelGridField(rng.normal(0.5, 1.0, res), rng.normal(size=res + (3,)), ((-0.5,) * 3, (0.5,) * 3))
    intr = Intrinsics.from_fov(16, 16, 60.0)
    loss = Loss("l2")
    for seed in range(5):
        gt, start = random_view_pair(seed)
        target = render_image(grid, intr, gt, 24).reshape(-1, 3)
        batch = full_batch(grid, intr, start, 24)
        _, g, _ = loss_and_pose_gradient(grid, batch, target, loss)
        ft, fr = fd_pose_gradient(grid, batch, target, loss, 1e-7, 1e-7)
        assert relative_error(g.d_translation, ft) < 1e-6
        assert relative_error(g.d_rotation, fr) < 1e-6


def test_grid_field_pose_gradient_at_millimetre_steps():
    grid = scene_sampled_grid()
    intr = Intrinsics.from_fov(16, 16, 60.0)
    loss = Loss("l2")
    passed = 0
    for seed in range(20):
        gt, start = random_view_pair(seed)
        target = render_image(grid, intr, gt, 24).reshape(-1, 3)
        batch = full_batch(grid, intr, start, 24)
        _, g, _ = loss_and_pose_gradient(grid, batch, target, loss)
        ft, fr = fd_pose_gradient(grid, batch, target, loss, 1e-3, 1e-3)
        passed += relative_error(g.d_translation, ft) < 1e-2 and relative_error(g.d_rotation, fr) < 1e-2
    # a 1e-3 step moves some samples across trilinear kink planes; 17 of 20 at calibration
    assert passed >= 15


def test_gradient_is_equivariant_under_a_common_rotation():
    Q = exp_so3(np.array([0.3, -0.7, 0.4]))
    rotated = RotatedField(SCENE, Q)
    gt, start = random_view_pair(8)
    target = render_image(SCENE, INTR, gt, 32).reshape(-1, 3)
    batch = full_batch(SCENE, INTR, start, 32)
    moved = RaySampleBatch(batch.pixels, batch.origins @ Q.T, batch.directions @ Q.T, batch.t, batch.near, batch.far)
    loss = Loss("l2")
    v0, g0, _ = loss_and_pose_gradient(SCENE, batch, target, loss)
    v1, g1, _ = loss_and_pose_gradient(rotated, moved, target, loss)
    assert abs(v0 - v1) < 1e-12
    np.testing.assert_allclose(g1.d_translation, Q @ g0.d_translation, atol=1e-9)
    np.testing.assert_allclose(g1.d_rotation, Q @ g0.d_rotation, atol=1e-9)


def test_gradient_vanishes_when_every_pixel_matches():
    _, pose = random_view_pair(9)
    batch = full_batch(SCENE, INTR, pose, 32)
    target = render_rays(SCENE, batch, grad=False).color
    for kind in ALL_LOSSES:
        _, g, _ = loss_and_pose_gradient(SCENE, batch, target, Loss(kind))
        assert not g.as_vector().any()


def test_render_is_deterministic_and_chunk_independent():
    _, pose = random_view_pair(10)
    intr = Intrinsics.from_fov(100, 90, 50.0)
    a = render_image(SCENE, intr, pose, 16)
    b = render_image(SCENE, intr, pose, 16)
    assert a.tobytes() == b.tobytes()
    batch = full_batch(SCENE, intr, pose, 16)
    whole = render_rays(SCENE, batch, grad=False).color
    assert whole.tobytes() == a.reshape(-1, 3).tobytes()


def test_image_loss_zero_against_own_render():
    _, pose = random_view_pair(11)
    img = render_image(SCENE, INTR, pose, 32)
    assert image_loss(SCENE, INTR, pose, img, Loss("l2"), n_samples=32) == 0.0


def test_empty_scene_renders_black():
    img = render_image(AnalyticScene(()), INTR, Pose.look_at((1.0, 1.0, 1.0)))
    assert not img.any()


def test_sphere_silhouette_is_centered():
    scene = AnalyticScene((SoftSphere((0, 0, 0), 0.3, (1.0, 1.0, 1.0), density=50.0, falloff=0.05),))
    img = render_image(scene, Intrinsics.from_fov(31, 31, 60.0), Pose.look_at((0.0, -2.0, 0.0)))
    lum = img.sum(axis=2)
    assert lum[15, 15] > 2.9
    np.testing.assert_allclose(lum, lum[::-1, ::-1], atol=1e-9)
    assert lum[0, 0] == 0.0
