"""scikit-learn style wrappers: input normalizers and a pose-lifting regressor."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data.dataset import PoseDataset
from .data.skeleton import H36M_17, SkeletonSpec
from .data.transforms import DatasetStats, denormalize_basic, fit_pixel_stats, normalize_basic, normalize_pixel
from .models import ModelConfig, build_model
from .protocols import mpjpe
from .training import TrainConfig, predict, train


def _as_points(X, dims: int) -> np.ndarray:
    if X.shape[1] % dims:
        raise ValueError(f"expected a multiple of {dims} columns, got {X.shape[1]}")
    return X.reshape(len(X), -1, dims)


class BasicNormalizer(TransformerMixin, BaseEstimator):
    """Pixel keypoints [M, 2N] to aspect-preserving coordinates in [-1, 1] along x."""

    def __init__(self, image_width: float = 1000.0, image_height: float = 1000.0):
        self.image_width = image_width
        self.image_height = image_height

    def fit(self, X, y=None):
        X = check_array(X)
        _as_points(X, 2)
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image_width and image_height must be positive")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        out = normalize_basic(_as_points(X, 2), self.image_width, self.image_height)
        return out.reshape(len(X), -1)

    def inverse_transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        return denormalize_basic(_as_points(X, 2), self.image_width, self.image_height).reshape(len(X), -1)


class PixelNormalizer(TransformerMixin, BaseEstimator):
    """Per-coordinate standardization with statistics from the training inputs."""

    def fit(self, X, y=None):
        X = check_array(X)
        stats = fit_pixel_stats(_as_points(X, 2))
        self.mean_, self.std_ = stats.mean, stats.std
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, ["mean_", "std_"])
        X = check_array(X)
        return normalize_pixel(_as_points(X, 2), DatasetStats(self.mean_, self.std_)).reshape(len(X), -1)

    def inverse_transform(self, X):
        check_is_fitted(self, ["mean_", "std_"])
        return check_array(X) * self.std_ + self.mean_


class PoseLifter(RegressorMixin, BaseEstimator):
    """Regress root-relative 3D joints [M, 3N] (mm) from pixel keypoints [M, 2N].

    Every frame is treated as an independent sample, so only single-frame
    architectures are available here; temporal models go through
    :func:`srlift.training.train` with a clip-structured dataset.
    ``score`` returns the negative MPJPE so that larger is better.
    """

    def __init__(self, kind: str = "sr", width: int = 1024, n_layers: int = 8, groups=5,
                 context_dim=1, recombine: str = "mult", l_fuse=None, l_split=None, l_link=None,
                 shuffle_groups: int = 0, epochs: int = 80, batch_size: int = 1024, lr: float = 1e-3,
                 decay: float = 0.95, flip: bool = True, normalization: str = "basic",
                 precision: str = "float32", image_width: float = 1000.0, image_height: float = 1000.0,
                 skeleton: SkeletonSpec | None = None, random_state: int = 0):
        self.kind = kind
        self.width = width
        self.n_layers = n_layers
        self.groups = groups
        self.context_dim = context_dim
        self.recombine = recombine
        self.l_fuse = l_fuse
        self.l_split = l_split
        self.l_link = l_link
        self.shuffle_groups = shuffle_groups
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.decay = decay
        self.flip = flip
        self.normalization = normalization
        self.precision = precision
        self.image_width = image_width
        self.image_height = image_height
        self.skeleton = skeleton
        self.random_state = random_state

    def _dataset(self, X, y=None) -> PoseDataset:
        sk = self.skeleton or H36M_17
        kp = _as_points(X, 2)
        if kp.shape[1] != sk.n_joints:
            raise ValueError(f"expected {2 * sk.n_joints} input columns for {sk.n_joints} joints, "
                             f"got {X.shape[1]}")
        m = len(kp)
        pose = np.zeros((m, sk.n_joints, 3)) if y is None else _as_points(y, 3)
        size = np.tile([self.image_width, self.image_height], (m, 1))
        # one synthetic clip so every frame is its own sample
        return PoseDataset(sk, kp, pose, size, ["fit"] * m, ["fit"] * m, ["fit"] * m, np.arange(m))

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        data = self._dataset(X, y)
        config = ModelConfig(kind=self.kind, n_joints=data.skeleton.n_joints, n_layers=self.n_layers,
                             width=self.width, groups=self.groups, context_dim=self.context_dim,
                             recombine=self.recombine, l_fuse=self.l_fuse, l_split=self.l_split,
                             l_link=self.l_link, shuffle_groups=self.shuffle_groups,
                             shuffle_seed=self.random_state)
        model = build_model(config, self.random_state)
        tc = TrainConfig(lr=self.lr, decay=self.decay, epochs=self.epochs, batch_size=self.batch_size,
                         seed=self.random_state, flip=self.flip, precision=self.precision,
                         normalization=self.normalization)
        result = train(model, data, tc)
        self.model_ = result.model
        self.log_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return predict(self.model_, self._dataset(X)).reshape(len(X), -1)

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        y = check_array(y)
        return -mpjpe(_as_points(self.predict(X), 3), _as_points(y, 3))
