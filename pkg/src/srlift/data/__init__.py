"""Skeletons, pose datasets, normalization and synthetic data."""

from .dataset import Clip, DatasetFormatError, PoseDataset, PoseSample, concatenate, load_dataset, save_dataset
from .skeleton import H36M_17, SkeletonSpec
from .synth import SynthConfig, compositional_split, forward_kinematics, synth_generate
from .transforms import (CameraIntrinsics, DatasetStats, denormalize_basic, fit_pixel_stats, flip_augment,
                         flip_dataset, mirror, mirror_keypoints, normalize_basic, normalize_pixel, project)

__all__ = [
    "CameraIntrinsics", "Clip", "DatasetFormatError", "DatasetStats", "H36M_17", "PoseDataset",
    "PoseSample", "SkeletonSpec", "SynthConfig", "compositional_split", "concatenate",
    "denormalize_basic", "fit_pixel_stats", "flip_augment", "flip_dataset", "forward_kinematics",
    "load_dataset", "mirror", "mirror_keypoints", "normalize_basic", "normalize_pixel", "project",
    "save_dataset", "synth_generate",
]
