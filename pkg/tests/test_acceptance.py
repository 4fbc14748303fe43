"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The long-running criteria (pose recovery, loss ablation, field training) are
marked ``slow``; they run at full size and take tens of minutes together.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from oracles import fd_pose_gradient, full_batch, random_view_pair, relative_error, smooth_ray_mask
from nerfpose.bench import BenchmarkConfig, run_benchmark
from nerfpose.camera import Intrinsics, orbit_poses
from nerfpose.cli import main
from nerfpose.demo2d import Demo2dConfig, run_demo
from nerfpose.fields import VoxelGridField, reference_scene
from nerfpose.imageio import write_ppm
from nerfpose.lie import perturb_pose, rng_stream, write_poses
from nerfpose.losses import ALL_LOSSES, CorruptionSpec, Loss, corrupt_image, loss_value_and_grad
from nerfpose.optim import AdamState, OptimizerConfig, adam_step_batch
from nerfpose.render import loss_and_pose_gradient, render_image
from nerfpose.search import SearchConfig, _Problem, evaluate_pool, init_pool, optimize_round, resample
from nerfpose.training import grid_loss_and_grad

from test_demo2d import deviation_oracle
from test_training import BOUNDS, random_grid, reference_loss, two_rays

SCENE = reference_scene()

# Held-out PSNR of the calibration run (single-sphere, 24 train / 6 test views,
# 64^3 grid, 2000 iterations, seed 0); the threshold sits one decibel below it.
CALIBRATED_PSNR = 40.04
PSNR_THRESHOLD = CALIBRATED_PSNR - 1.0


def test_criterion_1_gradient_fidelity():
    intr = Intrinsics.from_fov(32, 32, 60.0)
    n_samples = 32
    t0 = time.perf_counter()
    passed = {k.value: 0 for k in ALL_LOSSES}
    for seed in range(100):
        gt, start = random_view_pair(seed)
        target = render_image(SCENE, intr, gt, n_samples).reshape(-1, 3)
        batch = full_batch(SCENE, intr, start, n_samples)
        tg = target[batch.pixels]
        for kind in ALL_LOSSES:
            loss = Loss(kind)
            keep = smooth_ray_mask(SCENE, batch, tg, loss)
            _, g, _ = loss_and_pose_gradient(SCENE, batch.subset(keep), tg[keep], loss)
            fd_t, fd_r = fd_pose_gradient(SCENE, batch, tg, loss, pixel_mask=keep)
            err = max(relative_error(g.d_translation, fd_t), relative_error(g.d_rotation, fd_r))
            passed[kind.value] += err < 1e-3
    elapsed = time.perf_counter() - t0
    ok = min(passed.values()) >= 95 and elapsed < 120
    record(1, "gradient fidelity", ok, ", ".join(f"{k} {v}/100" for k, v in passed.items()) + f", {elapsed:.0f} s")
    assert ok


def test_criterion_2_decoupling_and_orthonormality():
    rng = np.random.default_rng(0)
    n, steps = 8, 2560
    cfg = OptimizerConfig()
    R0 = np.stack([p.rotation for p in orbit_poses(n, 1.5)])
    t0 = rng.normal(size=(n, 3))
    zero = np.zeros((n, 3))

    # rotation gradients only
    R, t, state = R0, t0, AdamState.zeros(n)
    rot_ok, worst = True, 0.0
    for k in range(steps):
        R, t, state = adam_step_batch(state, R, t, zero, rng.normal(size=(n, 3)), cfg, k)
        rot_ok &= np.array_equal(t, t0)
        worst = max(worst, float(np.max(np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)))))
    moved_r = not np.array_equal(R, R0)

    # translation gradients only
    R, t, state = R0, t0, AdamState.zeros(n)
    tr_ok = True
    for k in range(steps):
        R, t, state = adam_step_batch(state, R, t, rng.normal(size=(n, 3)), zero, cfg, k)
        tr_ok &= np.array_equal(R, R0)
    moved_t = not np.array_equal(t, t0)

    ok = rot_ok and tr_ok and moved_r and moved_t and worst < 1e-9
    record(2, "decoupling", ok, f"translation fixed {rot_ok}, rotation fixed {tr_ok}, "
                                f"max |R^T R - I| {worst:.1e} over {steps} steps")
    assert ok


def test_criterion_3_planar_demo():
    cfg = Demo2dConfig()
    se2, split = run_demo(cfg, "se2"), run_demo(cfg, "so2xt2")
    dev = deviation_oracle(split.positions, cfg.start[:2], cfg.target[:2])
    ok = (split.converged and se2.converged and split.steps_to_converge < se2.steps_to_converge and dev < 1e-6)
    record(3, "planar demo", ok, f"SO(2)xT(2) {split.steps_to_converge} steps, SE(2) {se2.steps_to_converge} steps, "
                                 f"path deviation {dev:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_4_pose_recovery():
    cfg = BenchmarkConfig(trials=20)
    t0 = time.perf_counter()
    report = run_benchmark(SCENE, cfg)
    elapsed = time.perf_counter() - t0
    multi, single = report.success_rate("l2", "multiple"), report.success_rate("l2", "single")
    ok = multi >= 0.90 and multi >= single and elapsed < 1800
    record(4, "pose recovery", ok, f"multiple {multi:.2f}, single {single:.2f}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_5_resampling_invariants():
    cfg = SearchConfig(rays_per_step=32, n_samples=16, eval_rays=256)
    intr = Intrinsics.from_fov(32, 32, 60.0)
    gt = orbit_poses(5, 1.52)[2]
    observed = render_image(SCENE, intr, gt, 32)
    problem = _Problem(SCENE, intr, observed, Loss("l2"), cfg)
    pool = init_pool(perturb_pose(gt, 15.0, 0.25, rng_stream(0)), cfg, 0)
    pixels = np.arange(0, intr.n_pixels, 3)
    counts, near_ok, best_ok = [], True, True
    optimize_round(pool, problem, 4)
    for k in range(cfg.rounds):
        evaluate_pool(pool, problem, pixels)
        before = pool.copy()
        survivors = resample(pool, cfg, k, 0)
        counts.append(len(survivors))
        cos_bound = math.cos(math.radians(cfg.resample_rot_deg))
        for i in np.setdiff1d(np.arange(len(pool)), survivors):
            rel = np.einsum("sij,ik->sjk", before.rotations[survivors], pool.rotations[i])
            cos = (np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0
            box = np.max(np.abs(before.translations[survivors] - pool.translations[i]), axis=1)
            near_ok &= bool(np.any((cos >= cos_bound - 1e-12) & (box <= cfg.resample_trans)))
        evaluate_pool(pool, problem, pixels)
        best_ok &= np.nanmin(pool.loss) <= np.nanmin(before.loss)
        optimize_round(pool, problem, 4, 4 * (k + 1))
    ok = counts == [16, 8, 4, 2] and near_ok and best_ok
    record(5, "resampling invariants", ok, f"survivors {counts}, within radii {near_ok}, best kept {best_ok}")
    assert ok


@pytest.mark.slow
def test_criterion_6_loss_ablation():
    # scale independence: doubling prediction, target and epsilon is exact in binary floating point
    clean = render_image(SCENE, Intrinsics.from_fov(32, 32, 60.0), orbit_poses(5, 1.52)[0], 32)
    observed = corrupt_image(clean, CorruptionSpec.benchmark_default(), rng_stream(0))
    pred = render_image(SCENE, Intrinsics.from_fov(32, 32, 60.0), orbit_poses(5, 1.52)[1], 32)
    base = loss_value_and_grad(Loss("mape"), pred, observed)[0]
    scale_ok = all(np.array_equal(base, loss_value_and_grad(Loss("mape", epsilon=Loss("mape").epsilon * k),
                                                            k * pred, k * observed)[0])
                   for k in (0.5, 2.0, 4.0, 256.0))

    cfg = BenchmarkConfig(trials=20, losses=("l2", "mape"), modes=("multiple",),
                          corruption=CorruptionSpec.benchmark_default())
    report = run_benchmark(SCENE, cfg)
    mape, l2 = report.success_rate("mape", "multiple"), report.success_rate("l2", "multiple")
    ok = scale_ok and mape >= l2
    record(6, "loss ablation", ok, f"MAPE {mape:.2f}, L2 {l2:.2f}, exact scale independence {scale_ok}")
    assert ok


@pytest.mark.slow
def test_criterion_7_field_training(tmp_path):
    # parameter gradients on a 4^3 grid
    grid = random_grid()
    batch = two_rays(grid)
    target = np.array([[0.2, 0.7, 0.4], [0.9, 0.1, 0.5]])
    _, g_d, g_c = grid_loss_and_grad(grid, batch, target, "l2", 0.0)
    h = 1e-6

    def fd(array_of, build):
        out = np.zeros_like(array_of)
        for i in np.ndindex(array_of.shape):
            up, dn = array_of.copy(), array_of.copy()
            up[i] += h
            dn[i] -= h
            out[i] = (reference_loss(build(up), batch, target) - reference_loss(build(dn), batch, target)) / (2 * h)
        return out

    fd_d = fd(grid.raw_density, lambda a: VoxelGridField(a, grid.raw_color, BOUNDS))
    fd_c = fd(grid.raw_color, lambda a: VoxelGridField(grid.raw_density, a, BOUNDS))
    grad_err = max(relative_error(g_d, fd_d), relative_error(g_c, fd_c))

    ds, out = tmp_path / "ds", tmp_path / "tr"
    assert main(["--out", str(ds), "make-scene", "--scene", "single-sphere", "--frames", "30", "--split-test", "0.2"]) == 0
    assert main(["--out", str(out), "train", "--dataset", str(ds)]) == 0
    log = json.loads((out / "train_log.json").read_text())
    test_psnr = log["test_psnr"]
    ok = grad_err < 1e-4 and test_psnr > PSNR_THRESHOLD
    record(7, "field training", ok, f"held-out PSNR {test_psnr:.2f} dB (threshold {PSNR_THRESHOLD:.2f}), "
                                    f"gradient rel. error {grad_err:.1e}")
    assert ok


def tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_8_determinism(tmp_path):
    intr = Intrinsics.from_fov(24, 24, 60.0)
    gt = orbit_poses(5, 1.52)[1]
    write_ppm(tmp_path / "obs.ppm", render_image(SCENE, intr, gt, 32))
    write_poses(tmp_path / "gt.txt", [gt])
    tiny = ["--pool-size", "4", "--explore-steps", "8", "--refine-steps", "4", "--rounds", "1", "--rays-per-step", "16"]
    ds = tmp_path / "ds"
    assert main(["--out", str(ds), "make-scene", "--scene", "single-sphere", "--frames", "6", "--width", "16",
                 "--height", "16", "--samples", "32"]) == 0
    commands = {
        "make-scene": ["make-scene", "--frames", "5", "--width", "16", "--height", "16", "--samples", "16"],
        "train": ["train", "--dataset", str(ds), "--resolution", "8", "--iterations", "10", "--rays", "64"],
        "render": ["render", "--pose", str(tmp_path / "gt.txt"), "--width", "24", "--height", "24",
                   "--image", str(tmp_path / "obs.ppm")],
        "invert": ["invert", "--image", str(tmp_path / "obs.ppm"), "--gt-pose", str(tmp_path / "gt.txt"), *tiny],
        "benchmark": ["benchmark", "--trials", "2", *tiny],
        "ablate-losses": ["ablate-losses", "--trials", "1", "--losses", "l1,mape,smape", *tiny],
        "demo2d": ["demo2d"],
    }
    same = {}
    for name, argv in commands.items():
        trees = []
        for run_id, threads in enumerate((1, 1, 8)):
            out = tmp_path / f"{name}-{run_id}"
            assert main(["--seed", "7", "--threads", str(threads), "--out", str(out), *argv]) == 0
            trees.append(tree_bytes(out))
        same[name] = bool(trees[0]) and trees[0] == trees[1] == trees[2]
    ok = all(same.values())
    record(8, "determinism", ok, ", ".join(f"{k} {'same' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
