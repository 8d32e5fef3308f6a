"""Pose datasets and their line-delimited text file format.

The first line of a dataset file is a JSON header (format tag, version,
units, skeleton). Every following line is one frame, tab separated::

    subject  action  camera  frame  width  height  <2N keypoint floats>  <3N pose floats>

Floats are written with 17 significant digits so a save/load round trip is
lossless.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import H36M_17, SkeletonSpec

FORMAT_TAG = "srlift-poses"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class PoseSample:
    keypoints_2d: np.ndarray  # [N, 2] px
    pose_3d: np.ndarray  # [N, 3] mm, root-relative
    image_width: float
    image_height: float
    subject: str
    action: str
    camera: str
    frame: int


@dataclass
class Clip:
    """A contiguous run of frames of one (subject, action, camera)."""

    subject: str
    action: str
    camera: str
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(eq=False)
class PoseDataset:
    skeleton: SkeletonSpec
    keypoints_2d: np.ndarray
    pose_3d: np.ndarray
    image_size: np.ndarray
    subject: np.ndarray
    action: np.ndarray
    camera: np.ndarray
    frame: np.ndarray
    # camera-frame root position; only the synthetic generator fills it in
    root_position: np.ndarray | None = None

    def __post_init__(self):
        n = self.skeleton.n_joints
        m = len(self.frame)
        self.keypoints_2d = np.asarray(self.keypoints_2d, dtype=np.float64).reshape(m, n, 2)
        self.pose_3d = np.asarray(self.pose_3d, dtype=np.float64).reshape(m, n, 3)
        self.image_size = np.asarray(self.image_size, dtype=np.float64).reshape(m, 2)
        self.subject = np.asarray(self.subject, dtype=object)
        self.action = np.asarray(self.action, dtype=object)
        self.camera = np.asarray(self.camera, dtype=object)
        self.frame = np.asarray(self.frame, dtype=np.int64)
        if not (np.all(np.isfinite(self.keypoints_2d)) and np.all(np.isfinite(self.pose_3d))):
            raise DatasetFormatError("coordinates must be finite")

    def __eq__(self, other) -> bool:
        """Field-for-field equality; ``root_position`` is auxiliary and ignored."""
        if not isinstance(other, PoseDataset):
            return NotImplemented
        return self.skeleton == other.skeleton and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("keypoints_2d", "pose_3d", "image_size", "subject", "action", "camera", "frame"))

    @classmethod
    def empty(cls, skeleton: SkeletonSpec = H36M_17) -> "PoseDataset":
        n = skeleton.n_joints
        return cls(skeleton, np.zeros((0, n, 2)), np.zeros((0, n, 3)), np.zeros((0, 2)),
                   [], [], [], np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.frame)

    def __getitem__(self, i: int) -> PoseSample:
        return PoseSample(self.keypoints_2d[i], self.pose_3d[i], float(self.image_size[i, 0]),
                          float(self.image_size[i, 1]), str(self.subject[i]), str(self.action[i]),
                          str(self.camera[i]), int(self.frame[i]))

    def subset(self, idx) -> "PoseDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return PoseDataset(self.skeleton, self.keypoints_2d[idx], self.pose_3d[idx],
                           self.image_size[idx], self.subject[idx], self.action[idx],
                           self.camera[idx], self.frame[idx],
                           None if self.root_position is None else self.root_position[idx])

    def keys(self) -> list[tuple[str, str, str, int]]:
        return list(zip(self.subject.tolist(), self.action.tolist(), self.camera.tolist(),
                        self.frame.tolist()))

    def clips(self) -> list[Clip]:
        """Contiguous frame runs per (subject, action, camera), in order of first appearance."""
        groups: dict[tuple, list[int]] = {}
        for i, key in enumerate(zip(self.subject.tolist(), self.action.tolist(), self.camera.tolist())):
            groups.setdefault(key, []).append(i)
        out = []
        for (s, a, c), idx in groups.items():
            idx = np.asarray(idx, dtype=np.intp)
            idx = idx[np.argsort(self.frame[idx], kind="stable")]
            breaks = np.nonzero(np.diff(self.frame[idx]) != 1)[0] + 1
            out.extend(Clip(s, a, c, run) for run in np.split(idx, breaks))
        return out

    def check_skeleton(self, skeleton: SkeletonSpec) -> None:
        if skeleton.n_joints != self.skeleton.n_joints:
            raise DatasetFormatError(f"expected {skeleton.n_joints} joints, dataset has "
                                     f"{self.skeleton.n_joints}")


def concatenate(datasets: list[PoseDataset]) -> PoseDataset:
    first = datasets[0]
    cat = lambda name: np.concatenate([getattr(d, name) for d in datasets])
    roots = None
    if all(d.root_position is not None for d in datasets):
        roots = cat("root_position")
    return PoseDataset(first.skeleton, cat("keypoints_2d"), cat("pose_3d"), cat("image_size"),
                       cat("subject"), cat("action"), cat("camera"), cat("frame"), roots)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _header(skeleton: SkeletonSpec) -> dict:
    return {"format": FORMAT_TAG, "version": FORMAT_VERSION,
            "units": {"keypoints_2d": "px", "pose_3d": "mm"}, "skeleton": skeleton.to_dict()}


def _check_label(value: str, what: str) -> str:
    if any(ch in value for ch in "\t\r\n") or value == "":
        raise DatasetFormatError(f"{what} label {value!r} must be non-empty and free of tabs/newlines")
    return value


def save_dataset(path, dataset: PoseDataset) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fmt = lambda v: format(float(v), ".17g")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_header(dataset.skeleton), sort_keys=True) + "\n")
        for i in range(len(dataset)):
            fields = [_check_label(str(dataset.subject[i]), "subject"),
                      _check_label(str(dataset.action[i]), "action"),
                      _check_label(str(dataset.camera[i]), "camera"),
                      str(int(dataset.frame[i])), fmt(dataset.image_size[i, 0]), fmt(dataset.image_size[i, 1])]
            fields += [fmt(v) for v in dataset.keypoints_2d[i].reshape(-1)]
            fields += [fmt(v) for v in dataset.pose_3d[i].reshape(-1)]
            fh.write("\t".join(fields) + "\n")
    os.replace(tmp, path)


def load_dataset(path, skeleton: SkeletonSpec | None = None) -> PoseDataset:
    """Read a dataset file; an empty file gives an empty dataset.

    Poses are re-expressed relative to the root joint, and keypoints outside
    the image raise a warning (detectors overshoot) rather than an error.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        return PoseDataset.empty(skeleton or H36M_17)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: header is not valid JSON ({exc})") from None
    if header.get("format") != FORMAT_TAG:
        raise DatasetFormatError(f"line 1: unknown format tag {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"line 1: unsupported format version {header.get('version')!r}")
    try:
        file_skeleton = SkeletonSpec.from_dict(header["skeleton"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line 1: invalid skeleton ({exc})") from None
    if skeleton is not None and skeleton.n_joints != file_skeleton.n_joints:
        raise DatasetFormatError(f"line 1: expected {skeleton.n_joints} joints, file skeleton has "
                                 f"{file_skeleton.n_joints}")
    n = file_skeleton.n_joints
    width = 6 + 5 * n
    labels, numbers = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != width:
            raise DatasetFormatError(f"line {lineno}: expected {width} fields for {n} joints, "
                                     f"got {len(parts)}")
        try:
            frame = int(parts[3])
            vals = [float(v) for v in parts[4:]]
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise DatasetFormatError(f"line {lineno}: non-finite value")
        if vals[0] <= 0 or vals[1] <= 0:
            raise DatasetFormatError(f"line {lineno}: image size must be positive")
        labels.append((parts[0], parts[1], parts[2], frame))
        numbers.append(vals)
    if not labels:
        return PoseDataset.empty(file_skeleton)
    arr = np.asarray(numbers, dtype=np.float64)
    m = len(labels)
    kp = arr[:, 2:2 + 2 * n].reshape(m, n, 2)
    pose = arr[:, 2 + 2 * n:].reshape(m, n, 3)
    pose = pose - pose[:, file_skeleton.root:file_skeleton.root + 1]
    size = arr[:, :2]
    outside = (kp < 0).any(axis=(1, 2)) | (kp[..., 0] > size[:, :1]).any(axis=1) | \
        (kp[..., 1] > size[:, 1:]).any(axis=1)
    if outside.any():
        warnings.warn(f"{int(outside.sum())} frames have keypoints outside the image bounds",
                      stacklevel=2)
    s, a, c, f = zip(*labels)
    return PoseDataset(file_skeleton, kp, pose, size, s, a, c, f)
