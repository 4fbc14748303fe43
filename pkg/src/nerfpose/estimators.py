"""scikit-learn style wrappers around pose search and grid fitting."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.exceptions import NotFittedError

from ._validation import check_image, check_pose
from .camera import Intrinsics
from .lie import rotation_error, translation_error
from .losses import Loss
from .render import render_image
from .search import SearchConfig, run_search
from .training import PosedDataset, TrainConfig, dataset_psnr, train_field


def _check_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class PoseEstimator(BaseEstimator):
    """Camera pose of an image under a known radiance field.

    Parameters
    ----------
    field : object
        Anything with ``bounds`` and ``query(points, grad)``.
    intrinsics : Intrinsics
    loss : str
        Pixel loss name.
    mode : {"multiple", "single"}
        Hypothesis pool with resampling, or one hypothesis for the same
        number of steps.
    config : SearchConfig, optional
    seed : int
    workers : int
        Threads over hypothesis chunks; results do not depend on it.

    Attributes
    ----------
    pose_ : Pose
    trace_ : SearchTrace
    """

    def __init__(self, field=None, intrinsics=None, loss="l2", mode="multiple", config=None, seed=0, workers=1):
        self.field = field
        self.intrinsics = intrinsics
        self.loss = loss
        self.mode = mode
        self.config = config
        self.seed = seed
        self.workers = workers

    def _search_config(self) -> SearchConfig:
        cfg = self.config if self.config is not None else SearchConfig()
        if isinstance(cfg, dict):
            cfg = SearchConfig.from_dict(cfg)
        if self.mode not in ("single", "multiple"):
            raise ValueError(f"mode must be 'single' or 'multiple', got {self.mode!r}")
        cfg = cfg.single() if self.mode == "single" else cfg
        return replace(cfg, workers=int(self.workers))

    def _validate(self):
        if self.field is None or not hasattr(self.field, "query"):
            raise ValueError("field must be a radiance field")
        if not isinstance(self.intrinsics, Intrinsics):
            raise ValueError("intrinsics must be an Intrinsics instance")
        return Loss(self.loss)

    def fit(self, image, start_pose):
        """Search from ``start_pose`` for the pose that best explains ``image``."""
        loss = self._validate()
        img = check_image(image, self.intrinsics)
        start = check_pose(start_pose, "start_pose")
        self.pose_, self.trace_ = run_search(self.field, self.intrinsics, img, start, loss,
                                             self._search_config(), seed=int(self.seed))
        self.start_pose_ = start
        return self

    def predict(self, images, start_poses) -> list:
        """Independent searches, one per (image, start pose) pair."""
        images = list(images)
        start_poses = list(start_poses)
        if len(images) != len(start_poses):
            raise ValueError("one start pose per image required")
        return [clone(self).fit(img, p).pose_ for img, p in zip(images, start_poses)]

    def render(self) -> np.ndarray:
        """The field rendered from the estimated pose."""
        _check_fitted(self, "pose_")
        return render_image(self.field, self.intrinsics, self.pose_)

    def errors(self, true_pose) -> tuple[float, float]:
        """Rotation error (degrees) and translation error of the estimate."""
        _check_fitted(self, "pose_")
        gt = check_pose(true_pose, "true_pose")
        return rotation_error(self.pose_, gt), translation_error(self.pose_, gt)


class GridFieldRegressor(BaseEstimator):
    """Voxel grid fit to posed images.

    ``fit`` takes a :class:`PosedDataset`; ``predict`` renders poses;
    ``score`` is the PSNR on a dataset's test frames.
    """

    def __init__(self, resolution=64, config=None, bounds=((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))):
        self.resolution = resolution
        self.config = config
        self.bounds = bounds

    def fit(self, dataset: PosedDataset, y=None):
        if not isinstance(dataset, PosedDataset):
            raise ValueError("fit expects a PosedDataset")
        cfg = self.config if self.config is not None else TrainConfig()
        if isinstance(cfg, dict):
            cfg = TrainConfig.from_dict(cfg)
        res = self.resolution
        res = (int(res),) * 3 if np.isscalar(res) else tuple(int(r) for r in res)
        if min(res) < 2:
            raise ValueError("resolution must be at least 2 per axis")
        result = train_field(dataset, res, cfg, self.bounds)
        self.field_ = result.field
        self.loss_curve_ = result.losses
        self.intrinsics_ = dataset.intrinsics
        return self

    def predict(self, poses) -> np.ndarray:
        _check_fitted(self, "field_")
        return np.stack([render_image(self.field_, self.intrinsics_, check_pose(p)) for p in poses])

    def score(self, dataset: PosedDataset, y=None) -> float:
        _check_fitted(self, "field_")
        return dataset_psnr(self.field_, dataset)
