"""Parallel Monte Carlo pose search over a pool of hypotheses.

The search has two phases. During free exploration every hypothesis, spread
around the start pose, is optimized on its own. Then, for a number of rounds,
the pool is ranked by loss, the best fraction survives, the rest are re-seeded
next to survivors, and everything is optimized again. The surviving fraction
halves every round.

Reproducibility: each hypothesis slot owns a random stream keyed by its id,
hypotheses are processed in fixed chunks of slots, and resampling is a serial
step between rounds. Results therefore do not depend on how many worker
threads are used.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import Intrinsics, RaySampleBatch, ray_box_interval, rays_for_pixels, stratified_samples
from .lie import Pose, exp_so3, rng_stream
from .losses import Loss, loss_value_and_grad
from .optim import AdamState, OptimizerConfig, adam_step_batch
from .render import backprop_point_gradients, ray_pose_terms, render_rays

# stream purposes; a stream is keyed by (seed, purpose, *ids)
_INIT, _BATCH, _RESAMPLE, _EVAL = range(4)


class SearchDiverged(RuntimeError):
    """Every hypothesis in the pool produced a non-finite loss."""


@dataclass(frozen=True)
class SearchConfig:
    """Schedule and budget of the search.

    ``explore_steps + rounds * refine_steps`` is the total step count. The
    kept fraction in round ``k`` is ``keep_ratio / 2**k``.
    """

    pool_size: int = 64
    explore_steps: int = 512
    refine_steps: int = 512
    rounds: int = 4
    keep_ratio: float = 0.25
    explore_rot_deg: float = 15.0
    explore_trans: float = 0.25
    resample_rot_deg: float = 3.0
    resample_trans: float = 0.05
    rays_per_step: int = 1024
    eval_rays: int = 1024
    n_samples: int = 64
    jitter: bool = False
    chunk_size: int = 16
    workers: int = 1
    trace_every: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.pool_size < 1 or self.rounds < 0 or self.explore_steps < 0 or self.refine_steps < 0:
            raise ValueError("pool_size >= 1 and non-negative step counts required")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if min(self.explore_rot_deg, self.explore_trans, self.resample_rot_deg, self.resample_trans) < 0:
            raise ValueError("radii must be non-negative")
        if self.rays_per_step < 1 or self.eval_rays < 1 or self.n_samples < 1:
            raise ValueError("ray and sample counts must be positive")
        if self.chunk_size < 1 or self.workers < 1 or self.trace_every < 1:
            raise ValueError("chunk_size, workers and trace_every must be positive")
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig.from_dict(self.optimizer))

    @property
    def total_steps(self) -> int:
        return self.explore_steps + self.rounds * self.refine_steps

    def single(self) -> "SearchConfig":
        """One hypothesis at the start pose, same total step budget."""
        return replace(self, pool_size=1, rounds=0, explore_steps=self.total_steps,
                       explore_rot_deg=0.0, explore_trans=0.0)

    def survivors_in_round(self, round_index: int) -> int:
        return math.ceil(self.keep_ratio / 2**round_index * self.pool_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        return cls(**d)


@dataclass
class HypothesisPool:
    """Struct-of-arrays pool; index ``i`` is hypothesis ``i`` and its stream id."""

    rotations: np.ndarray
    translations: np.ndarray
    adam: AdamState
    loss: np.ndarray
    alive: np.ndarray
    streams: list

    def __len__(self) -> int:
        return len(self.loss)

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.translations[i])

    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self))]

    def copy(self) -> "HypothesisPool":
        # generators are shared on purpose: copies are snapshots of the poses
        return HypothesisPool(self.rotations.copy(), self.translations.copy(), self.adam.copy(),
                              self.loss.copy(), self.alive.copy(), list(self.streams))


@dataclass
class SearchTrace:
    """Append-only record of the search.

    ``records`` rows are ``(step, hypothesis_id, loss, 12 pose numbers)``,
    where ``loss`` is the mean loss of that hypothesis's ray batch at
    ``step``. ``rounds`` holds the ranking after each phase.
    """

    records: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    best_id: int = -1
    best_loss: float = float("nan")

    def append(self, step: int, ids, losses, rotations, translations) -> None:
        if self.records and step < self.records[-1][0][0]:
            raise ValueError("trace steps must be non-decreasing")
        rows = np.column_stack([np.full(len(ids), step, dtype=float), np.asarray(ids, dtype=float),
                                np.asarray(losses, dtype=float), np.asarray(rotations).reshape(len(ids), 9),
                                np.asarray(translations).reshape(len(ids), 3)])
        self.records.append(rows)

    def table(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 15))
        return np.concatenate(self.records, axis=0)

    def write_csv(self, path) -> None:
        header = ["step", "hypothesis_id", "loss"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in self.table():
                w.writerow([int(row[0]), int(row[1])] + [repr(float(x)) for x in row[2:]])

    def summary(self) -> dict:
        return {"best_id": int(self.best_id), "best_loss": float(self.best_loss), "rounds": self.rounds}

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _offsets(rng: np.random.Generator, rot_deg: float, trans: float):
    """Rotation uniform in angle over a ball, translation uniform in a box."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rot_deg) * rng.random()
    shift = rng.uniform(-trans, trans, size=3)
    return exp_so3(angle * axis), shift


def _offset_pose(R, t, rng, rot_deg, trans):
    dR, dt = _offsets(rng, rot_deg, trans)
    return dR @ R, t + dt


def init_pool(start: Pose, cfg: SearchConfig, seed: int) -> HypothesisPool:
    n = cfg.pool_size
    rotations = np.empty((n, 3, 3))
    translations = np.empty((n, 3))
    for i in range(n):
        rotations[i], translations[i] = _offset_pose(start.rotation, start.translation, rng_stream(seed, _INIT, i),
                                                     cfg.explore_rot_deg, cfg.explore_trans)
    streams = [rng_stream(seed, _BATCH, i) for i in range(n)]
    return HypothesisPool(rotations, translations, AdamState.zeros(n), np.full(n, np.nan),
                          np.ones(n, dtype=bool), streams)


class _Problem:
    """Field, observation and loss shared read-only by all hypotheses."""

    def __init__(self, field_, intr: Intrinsics, observed, loss: Loss, cfg: SearchConfig):
        observed = np.asarray(observed, dtype=float)
        if observed.shape != (intr.height, intr.width, 3):
            raise ValueError(f"observed image has shape {observed.shape}, intrinsics expect "
                             f"{(intr.height, intr.width, 3)}")
        self.field = field_
        self.intr = intr
        self.target = observed.reshape(-1, 3)
        self.loss = loss if isinstance(loss, Loss) else Loss(loss)
        self.cfg = cfg
        self.bounds = field_.bounds

    def batch(self, rotations, translations, pixels, rngs=None) -> RaySampleBatch:
        o, d = rays_for_pixels(self.intr, rotations, translations, pixels)
        o = o.reshape(-1, 3)
        d = d.reshape(-1, 3)
        near, far = ray_box_interval(o, d, *self.bounds)
        k = self.cfg.n_samples
        if rngs is None:
            t = stratified_samples(near, far, k)
        else:
            per = pixels.shape[-1]
            jitter = np.concatenate([g.random((per, k)) for g in rngs])
            t = near[:, None] + (far - near)[:, None] / k * (np.arange(k) + jitter)
        return RaySampleBatch(np.asarray(pixels).reshape(-1), o, d, t, near, far)

    def step_gradients(self, rotations, translations, pixels, rngs=None):
        """Per-hypothesis batch loss, force and torque; pixels are (p, R)."""
        p, r = pixels.shape
        batch = self.batch(rotations, translations, pixels, rngs)
        rendered = render_rays(self.field, batch)
        values, dL_dC = loss_value_and_grad(self.loss, rendered.color, self.target[batch.pixels])
        force, torque = ray_pose_terms(batch, backprop_point_gradients(rendered, dL_dC))
        return (values.reshape(p, r).mean(axis=1), force.reshape(p, r, 3).mean(axis=1),
                torque.reshape(p, r, 3).mean(axis=1))

    def evaluate(self, rotations, translations, pixels):
        p = rotations.shape[0]
        px = np.broadcast_to(pixels, (p, len(pixels)))
        batch = self.batch(rotations, translations, px)
        rendered = render_rays(self.field, batch, grad=False)
        values, _ = loss_value_and_grad(self.loss, rendered.color, self.target[batch.pixels])
        return values.reshape(p, -1).mean(axis=1)


def _chunks(pool: HypothesisPool, cfg: SearchConfig):
    n = len(pool)
    for start in range(0, n, cfg.chunk_size):
        idx = np.arange(start, min(start + cfg.chunk_size, n))
        idx = idx[pool.alive[idx]]
        if len(idx):
            yield idx


def _map_chunks(fn, chunks, workers: int):
    chunks = list(chunks)
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, chunks))


def _run_chunk(problem: _Problem, pool: HypothesisPool, idx, steps: int, start_step: int, record_every: int):
    """Optimize the hypotheses ``idx`` for ``steps`` steps; returns trace rows."""
    cfg = problem.cfg
    R = pool.rotations[idx].copy()
    t = pool.translations[idx].copy()
    state = pool.adam.take(idx)
    live = np.ones(len(idx), dtype=bool)
    rows = []
    last_loss = np.full(len(idx), np.nan)
    streams = [pool.streams[i] for i in idx]
    for s in range(steps):
        step = start_step + s
        act = np.flatnonzero(live)
        if not len(act):
            break
        rngs = [streams[a] for a in act]
        pixels = np.stack([g.choice(problem.intr.n_pixels, size=cfg.rays_per_step, replace=False) for g in rngs])
        loss, d_t, d_r = problem.step_gradients(R[act], t[act], pixels, rngs if cfg.jitter else None)
        ok = np.isfinite(loss) & np.all(np.isfinite(d_t), axis=1) & np.all(np.isfinite(d_r), axis=1)
        live[act[~ok]] = False
        act, loss, d_t, d_r = act[ok], loss[ok], d_t[ok], d_r[ok]
        last_loss[act] = loss
        newR, newt, new_state = adam_step_batch(state.take(act), R[act], t[act], d_t, d_r, cfg.optimizer, step)
        R[act], t[act] = newR, newt
        state.put(act, new_state)
        if (step + 1) % record_every == 0 or s == steps - 1:
            rows.append((step, idx[act], loss, R[act].copy(), t[act].copy()))
    pool.rotations[idx] = R
    pool.translations[idx] = t
    pool.adam.put(idx, state)
    pool.alive[idx] = live
    return rows


def optimize_round(pool: HypothesisPool, problem: _Problem, steps: int, start_step: int = 0,
                   trace: SearchTrace | None = None) -> HypothesisPool:
    """Run ``steps`` optimizer steps on every live hypothesis, in place.

    Hypotheses whose loss or gradient turns non-finite are marked dead and
    left out of later ranking.
    """
    if steps <= 0:
        return pool
    cfg = problem.cfg
    results = _map_chunks(lambda idx: _run_chunk(problem, pool, idx, steps, start_step, cfg.trace_every),
                          _chunks(pool, cfg), cfg.workers)
    if trace is not None:
        by_step = {}
        for rows in results:
            for row in rows:
                by_step.setdefault(row[0], []).append(row)
        for step in sorted(by_step):
            group = by_step[step]
            trace.append(step, np.concatenate([g[1] for g in group]), np.concatenate([g[2] for g in group]),
                         np.concatenate([g[3] for g in group]), np.concatenate([g[4] for g in group]))
    return pool


def evaluate_pool(pool: HypothesisPool, problem: _Problem, pixels) -> None:
    """Rank-ready loss estimates on a shared pixel subset; non-finite kills."""
    def run(idx):
        return idx, problem.evaluate(pool.rotations[idx], pool.translations[idx], pixels)

    for idx, values in _map_chunks(run, _chunks(pool, problem.cfg), problem.cfg.workers):
        pool.loss[idx] = values
        pool.alive[idx] &= np.isfinite(values)
    pool.loss[~pool.alive] = np.nan


def rank(pool: HypothesisPool) -> np.ndarray:
    """Live hypothesis ids by ascending loss, ties broken by id."""
    ids = np.flatnonzero(pool.alive)
    return ids[np.lexsort((ids, pool.loss[ids]))]


def resample(pool: HypothesisPool, cfg: SearchConfig, round_index: int, seed: int) -> np.ndarray:
    """Keep the best ``ceil(keep_ratio / 2**round * pool_size)`` hypotheses and
    re-seed every other slot next to a survivor, in place.

    A survivor is picked for each re-seeded slot with probability given by a
    softmax of negative loss at temperature equal to the mean survivor loss.
    Re-seeded slots start with fresh Adam state; survivors keep theirs.
    Returns the survivor ids.
    """
    order = rank(pool)
    if not len(order):
        raise SearchDiverged("all hypotheses diverged")
    survivors = order[: min(cfg.survivors_in_round(round_index), len(order))]
    losses = pool.loss[survivors]
    temperature = float(np.mean(losses))
    if temperature > 0 and np.isfinite(temperature):
        logits = -(losses - losses.min()) / temperature
        weights = np.exp(logits)
    else:
        weights = np.ones(len(survivors))
    weights /= weights.sum()
    rng = rng_stream(seed, _RESAMPLE, round_index)
    keep = np.zeros(len(pool), dtype=bool)
    keep[survivors] = True
    for i in np.flatnonzero(~keep):
        parent = survivors[rng.choice(len(survivors), p=weights)]
        pool.rotations[i], pool.translations[i] = _offset_pose(
            pool.rotations[parent], pool.translations[parent], rng, cfg.resample_rot_deg, cfg.resample_trans)
        pool.adam.reset(i)
        pool.loss[i] = np.nan
        pool.alive[i] = True
    return survivors


def _eval_pixels(intr: Intrinsics, cfg: SearchConfig, seed: int, round_index: int) -> np.ndarray:
    n = min(cfg.eval_rays, intr.n_pixels)
    return rng_stream(seed, _EVAL, round_index).choice(intr.n_pixels, size=n, replace=False)


def run_search(field_, intr: Intrinsics, observed, start: Pose, loss="l2", cfg: SearchConfig | None = None,
               seed: int = 0):
    """Estimate the camera pose of ``observed``.

    Returns the pose of the lowest-loss hypothesis after the last phase and
    the :class:`SearchTrace`.
    """
    cfg = cfg or SearchConfig()
    problem = _Problem(field_, intr, observed, loss, cfg)
    trace = SearchTrace()
    pool = init_pool(start, cfg, seed)
    step = 0
    for round_index in range(-1, cfg.rounds):
        survivors = None
        if round_index >= 0:
            survivors = resample(pool, cfg, round_index, seed)
        steps = cfg.explore_steps if round_index < 0 else cfg.refine_steps
        optimize_round(pool, problem, steps, step, trace)
        step += steps
        evaluate_pool(pool, problem, _eval_pixels(intr, cfg, seed, round_index + 1))
        order = rank(pool)
        if not len(order):
            raise SearchDiverged("all hypotheses diverged")
        trace.rounds.append({
            "round": round_index,
            "end_step": step,
            "survivors": [] if survivors is None else [int(s) for s in survivors],
            "best_id": int(order[0]),
            "best_loss": float(pool.loss[order[0]]),
        })
    best = int(rank(pool)[0])
    trace.best_id = best
    trace.best_loss = float(pool.loss[best])
    return pool.pose(best), trace
