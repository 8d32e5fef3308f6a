"""Input normalization, mirror augmentation and pinhole projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import PoseDataset, PoseSample
from .skeleton import SkeletonSpec


def _per_sample(v) -> np.ndarray:
    """Per-sample scalar(s) shaped to broadcast against the [..., N] coordinate planes."""
    return np.asarray(v, dtype=np.float64)[..., None]


def normalize_basic(keypoints_2d, w, h) -> np.ndarray:
    """Map pixels to ``x' = 2x/w - 1``, ``y' = 2y/w - h/w`` (both axes scaled by width).

    ``keypoints_2d`` is [..., N, 2]; ``w`` and ``h`` are scalars or arrays
    matching the leading dimensions.
    """
    kp = np.asarray(keypoints_2d, dtype=np.float64)
    w, h = _per_sample(w), _per_sample(h)
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("image width and height must be positive")
    return np.stack([2.0 * kp[..., 0] / w - 1.0, 2.0 * kp[..., 1] / w - h / w], axis=-1)


def denormalize_basic(normalized, w, h) -> np.ndarray:
    z = np.asarray(normalized, dtype=np.float64)
    w, h = _per_sample(w), _per_sample(h)
    return np.stack([(z[..., 0] + 1.0) * w / 2.0, (z[..., 1] + h / w) * w / 2.0], axis=-1)


@dataclass(frozen=True)
class DatasetStats:
    """Per-coordinate mean and standard deviation of the training 2D inputs."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            raise ValueError("every coordinate needs a positive standard deviation")

    def to_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_pixel_stats(keypoints_2d) -> DatasetStats:
    """Per-coordinate statistics over [M, N, 2] training keypoints (population std)."""
    kp = np.asarray(keypoints_2d, dtype=np.float64)
    flat = kp.reshape(len(kp), -1)
    if len(flat) == 0:
        raise ValueError("cannot fit normalization statistics on an empty set")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    bad = np.nonzero(~(std > 0))[0]
    if bad.size:
        raise ValueError(f"zero standard deviation for coordinates {bad.tolist()}; "
                         f"training inputs do not vary")
    return DatasetStats(mean, std)


def normalize_pixel(keypoints_2d, stats: DatasetStats) -> np.ndarray:
    kp = np.asarray(keypoints_2d, dtype=np.float64)
    flat = kp.reshape(kp.shape[:-2] + (-1,))
    return ((flat - stats.mean) / stats.std).reshape(kp.shape)


def mirror(points, skeleton: SkeletonSpec) -> np.ndarray:
    """Negate x and swap left/right joints of [..., N, D] coordinates."""
    p = np.array(points, dtype=np.float64)[..., skeleton.mirror_permutation(), :]
    p[..., 0] = -p[..., 0]
    return p


def flip_augment(sample: PoseSample, skeleton: SkeletonSpec) -> PoseSample:
    """Mirrored copy of a frame: negate x of the 2D and 3D joints, then swap left/right.

    This is an exact involution. Negating x mirrors about ``x = 0``, so the
    2D keypoints should be centred (e.g. basic-normalized) for the result to
    stay on screen; :func:`mirror_keypoints` mirrors raw pixels instead.
    """
    return PoseSample(mirror(sample.keypoints_2d, skeleton), mirror(sample.pose_3d, skeleton),
                      sample.image_width, sample.image_height, sample.subject, sample.action,
                      sample.camera, sample.frame)


def mirror_keypoints(keypoints_2d, image_width, skeleton: SkeletonSpec) -> np.ndarray:
    """Mirror pixel keypoints [..., N, 2] about the vertical image centre line."""
    kp = mirror(keypoints_2d, skeleton)
    kp[..., 0] += _per_sample(image_width)
    return kp


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


def project(pose_3d, cam: CameraIntrinsics, names=None) -> np.ndarray:
    """Pinhole projection of camera-frame points [..., N, 3] in mm to pixels."""
    p = np.asarray(pose_3d, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        j = int(np.nonzero(~(z > 0))[-1][0])
        label = f"{j} ({names[j]})" if names is not None else str(j)
        raise ValueError(f"joint {label} has non-positive depth; cannot project")
    return np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def flip_dataset(dataset: PoseDataset) -> PoseDataset:
    """Image-mirrored copy of a dataset (pixel keypoints mirrored about the image centre)."""
    sk = dataset.skeleton
    return PoseDataset(sk, mirror_keypoints(dataset.keypoints_2d, dataset.image_size[:, 0], sk),
                       mirror(dataset.pose_3d, sk), dataset.image_size, dataset.subject,
                       dataset.action, dataset.camera, dataset.frame)
