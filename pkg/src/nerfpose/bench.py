"""Seeded pose-recovery benchmark and loss ablation.

A trial takes a ground-truth view, renders (and optionally corrupts) the
observation, perturbs the pose, and runs the search in each requested mode.
Everything that goes into the report is a pure function of the config and
seed; wall-clock times are collected separately.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .camera import Intrinsics, orbit_poses
from .lie import Pose, perturb_pose, rng_stream, rotation_error, translation_error
from .losses import ALL_LOSSES, CorruptionSpec, Loss, LossKind, corrupt_image
from .render import image_loss, render_image
from .search import SearchConfig, run_search

# stream purposes, disjoint from the search's
_PERTURB, _CORRUPT, _TRIAL = 10, 11, 12

MODES = ("single", "multiple")


def desk_search_config(**overrides) -> SearchConfig:
    """Full step schedule and pool with a small per-step ray budget."""
    base = dict(rays_per_step=32, n_samples=32, eval_rays=1024, trace_every=64)
    base.update(overrides)
    return SearchConfig(**base)


@dataclass(frozen=True)
class BenchmarkConfig:
    trials: int = 20
    seed: int = 0
    rot_range_deg: float = 15.0
    trans_range: float = 0.25
    rot_threshold_deg: float = 5.0
    trans_threshold: float = 0.05
    losses: tuple = ("l2",)
    modes: tuple = MODES
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    search: SearchConfig = field(default_factory=desk_search_config)
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    n_views: int = 5
    view_radius: float = 1.52
    render_samples: int = 64

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not (self.rot_threshold_deg > 0 and self.trans_threshold > 0):
            raise ValueError("success thresholds must be positive")
        if self.rot_range_deg < 0 or self.trans_range < 0:
            raise ValueError("perturbation ranges must be non-negative")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}; expected one of {MODES}")
        object.__setattr__(self, "losses", tuple(LossKind.parse(k).value for k in self.losses))
        object.__setattr__(self, "modes", tuple(self.modes))
        if isinstance(self.corruption, dict):
            object.__setattr__(self, "corruption", CorruptionSpec.from_dict(self.corruption))
        if isinstance(self.search, dict):
            object.__setattr__(self, "search", desk_search_config(**self.search))

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.fov_deg)

    def views(self) -> list[Pose]:
        return orbit_poses(self.n_views, self.view_radius)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["search"].pop("workers")  # never affects results
        d["losses"] = list(self.losses)
        d["modes"] = list(self.modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        for key in ("losses", "modes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrialResult:
    trial: int
    view: int
    loss: str
    mode: str
    gt_pose: list
    start_pose: list
    final_pose: list | None
    start_rot_error_deg: float
    start_trans_error: float
    rot_error_deg: float
    trans_error: float
    final_loss: float
    success_rot: bool
    success_trans: bool
    error: str = ""

    @property
    def success(self) -> bool:
        return self.success_rot and self.success_trans


CSV_FIELDS = ["trial", "view", "loss", "mode", "rot_error_deg", "trans_error", "start_rot_error_deg",
              "start_trans_error", "final_loss", "success_rot", "success_trans", "success", "error"]


@dataclass
class BenchmarkReport:
    config: dict
    results: list
    wall_times: dict = field(default_factory=dict)

    def rows(self, loss: str | None = None, mode: str | None = None) -> list:
        return [r for r in self.results if (loss is None or r.loss == loss) and (mode is None or r.mode == mode)]

    def success_rate(self, loss: str, mode: str, kind: str = "both") -> float:
        rows = self.rows(loss, mode)
        if not rows:
            return float("nan")
        attr = {"both": "success", "rot": "success_rot", "trans": "success_trans"}[kind]
        return sum(bool(getattr(r, attr)) for r in rows) / len(rows)

    def summary(self) -> dict:
        out = {}
        for loss in dict.fromkeys(r.loss for r in self.results):
            out[loss] = {}
            for mode in dict.fromkeys(r.mode for r in self.rows(loss)):
                rows = self.rows(loss, mode)
                rot = np.array([r.rot_error_deg for r in rows])
                tr = np.array([r.trans_error for r in rows])
                out[loss][mode] = {
                    "trials": len(rows),
                    "successes": sum(r.success for r in rows),
                    "success_rate": self.success_rate(loss, mode),
                    "rot_success_rate": self.success_rate(loss, mode, "rot"),
                    "trans_success_rate": self.success_rate(loss, mode, "trans"),
                    "median_rot_error_deg": float(np.median(rot)),
                    "median_trans_error": float(np.median(tr)),
                    "failures": sum(bool(r.error) for r in rows),
                }
        return out

    def to_dict(self) -> dict:
        results = []
        for r in self.results:
            d = asdict(r)
            d["success"] = r.success
            results.append(d)
        return {"config": self.config, "summary": self.summary(), "trials": results}

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.results:
            w.writerow([r.trial, r.view, r.loss, r.mode, repr(r.rot_error_deg), repr(r.trans_error),
                        repr(r.start_rot_error_deg), repr(r.start_trans_error), repr(r.final_loss),
                        int(r.success_rot), int(r.success_trans), int(r.success), r.error])
        return buf.getvalue()

    def table(self) -> str:
        """Loss-by-mode grid of rotation / translation success rates."""
        s = self.summary()
        modes = list(dict.fromkeys(m for v in s.values() for m in v))
        lines = ["loss".ljust(12) + "".join(f"{m:>22}" for m in modes)]
        for loss, per_mode in s.items():
            cells = []
            for m in modes:
                v = per_mode.get(m)
                cells.append(f"{'-':>22}" if v is None else
                             f"{v['rot_success_rate']:>10.2f} / {v['trans_success_rate']:<9.2f}")
            lines.append(loss.ljust(12) + "".join(cells))
        return "\n".join(lines)


def _finite(obj):
    """JSON cannot carry NaN or infinity; map them to null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def trial_setup(field_, cfg: BenchmarkConfig, trial: int, cache: dict | None = None):
    """Ground truth, observation and start pose of one trial."""
    views = cfg.views()
    view = trial % len(views)
    gt = views[view]
    intr = cfg.intrinsics
    key = ("clean", view)
    if cache is not None and key in cache:
        clean = cache[key]
    else:
        clean = render_image(field_, intr, gt, cfg.render_samples)
        if cache is not None:
            cache[key] = clean
    observed = corrupt_image(clean, cfg.corruption, rng_stream(cfg.seed, _CORRUPT, trial))
    start = perturb_pose(gt, cfg.rot_range_deg, cfg.trans_range, rng_stream(cfg.seed, _PERTURB, trial))
    return view, gt, observed, start


def search_config_for(cfg: BenchmarkConfig, mode: str) -> SearchConfig:
    return cfg.search.single() if mode == "single" else cfg.search


def run_benchmark(field_, cfg: BenchmarkConfig, workers: int = 1, on_trace=None, log=None) -> BenchmarkReport:
    """Run every (trial, loss, mode) combination of ``cfg``.

    ``on_trace(trial, loss, mode, trace)`` receives each search trace. A
    crashing trial is recorded as a failure and the run continues.
    """
    intr = cfg.intrinsics
    cache: dict = {}
    results = []
    wall = {}
    for trial in range(cfg.trials):
        view, gt, observed, start = trial_setup(field_, cfg, trial, cache)
        search_seed = int(rng_stream(cfg.seed, _TRIAL, trial).integers(2**31))
        for loss in cfg.losses:
            for mode in cfg.modes:
                scfg = replace(search_config_for(cfg, mode), workers=workers)
                t0 = time.perf_counter()
                final, error, final_loss = None, "", float("nan")
                try:
                    final, trace = run_search(field_, intr, observed, start, Loss(loss), scfg, seed=search_seed)
                    final_loss = image_loss(field_, intr, final, observed, Loss(loss), n_samples=cfg.render_samples)
                    if on_trace is not None:
                        on_trace(trial, loss, mode, trace)
                except Exception as exc:  # a crash is a failed trial, not a failed run
                    error = f"{type(exc).__name__}: {exc}"
                wall[f"{trial}/{loss}/{mode}"] = time.perf_counter() - t0
                rot = rotation_error(final, gt) if final is not None else float("inf")
                tr = translation_error(final, gt) if final is not None else float("inf")
                res = TrialResult(trial, view, loss, mode, gt.to_row().tolist(), start.to_row().tolist(),
                                  None if final is None else final.to_row().tolist(),
                                  rotation_error(start, gt), translation_error(start, gt), rot, tr, final_loss,
                                  bool(rot < cfg.rot_threshold_deg), bool(tr < cfg.trans_threshold), error)
                results.append(res)
                if log is not None:
                    log(f"trial {trial} view {view} {loss}/{mode}: rot {rot:.3f} deg, trans {tr:.4f}"
                        f"{' OK' if res.success else ''}{' ' + error if error else ''}")
    return BenchmarkReport(cfg.to_dict(), results, wall)


def run_loss_ablation(field_, cfg: BenchmarkConfig, losses=None, workers: int = 1, on_trace=None,
                      log=None) -> BenchmarkReport:
    """One benchmark per loss against the same corrupted observations."""
    losses = tuple(k.value for k in ALL_LOSSES) if losses is None else tuple(losses)
    return run_benchmark(field_, replace(cfg, losses=losses), workers, on_trace, log)
