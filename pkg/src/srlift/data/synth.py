"""Forward-kinematics pose generator.

Upper-body and lower-body motions come from two independent pattern
libraries, so every (upper, lower) combination can be rendered and
compositional train/test splits are easy to build. Each clip is one subject
performing one combination, filmed by every camera of a ring around the
capture area.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .dataset import PoseDataset
from .skeleton import H36M_17, SkeletonSpec
from .transforms import CameraIntrinsics, project

# rest-pose bone directions in the body frame: x to the subject's left, y up, z forward
REST_DIRECTIONS = {
    "r_hip": (-1, 0, 0), "r_knee": (0, -1, 0), "r_ankle": (0, -1, 0),
    "l_hip": (1, 0, 0), "l_knee": (0, -1, 0), "l_ankle": (0, -1, 0),
    "spine": (0, 1, 0), "thorax": (0, 1, 0), "neck": (0, 1, 0), "head": (0, 1, 0),
    "l_shoulder": (1, 0, 0), "l_elbow": (0, -1, 0), "l_wrist": (0, -1, 0),
    "r_shoulder": (-1, 0, 0), "r_elbow": (0, -1, 0), "r_wrist": (0, -1, 0),
}

# Patterns return local Euler angles (degrees, about x/y/z) keyed by the joint
# whose rotation moves the bone below it. Flexion of hips and shoulders is a
# negative x rotation (limb swings forward); knees flex with positive x.


def _raise(ph, a):
    s = np.sin(ph)
    return {"l_shoulder": (0, 0, 105 + 35 * a * s), "r_shoulder": (0, 0, -(105 + 35 * a * np.sin(ph + 0.6))),
            "l_elbow": (-(20 + 15 * s), 0, 0), "r_elbow": (-(20 - 15 * s), 0, 0)}


def _swing(ph, a):
    s = np.sin(ph)
    return {"l_shoulder": (-35 * a * s, 0, 12), "r_shoulder": (35 * a * s, 0, -12),
            "l_elbow": (-(30 + 20 * (1 + s)), 0, 0), "r_elbow": (-(30 + 20 * (1 - s)), 0, 0)}


def _reach(ph, a):
    return {"l_shoulder": (-(85 + 25 * a * np.sin(ph)), 0, 8), "r_shoulder": (-(85 - 25 * a * np.sin(ph)), 0, -8),
            "l_elbow": (-10, 0, 0), "r_elbow": (-10, 0, 0)}


def _walk(ph, a):
    s = np.sin(ph)
    return {"l_hip": (-28 * a * s, 0, 0), "r_hip": (28 * a * s, 0, 0),
            "l_knee": (8 + 40 * np.maximum(0.0, np.sin(ph - 1.2)), 0, 0),
            "r_knee": (8 + 40 * np.maximum(0.0, -np.sin(ph - 1.2)), 0, 0)}


def _squat(ph, a):
    s = np.sin(ph)
    return {"l_hip": (-(65 + 30 * a * s), 0, 4), "r_hip": (-(65 + 30 * a * s), 0, -4),
            "l_knee": (95 + 45 * a * s, 0, 0), "r_knee": (95 + 45 * a * s, 0, 0)}


def _lunge(ph, a):
    s = np.sin(ph)
    return {"l_hip": (-(60 + 15 * a * s), 0, 0), "r_hip": (20 + 10 * a * s, 0, 0),
            "l_knee": (70 + 25 * a * s, 0, 0), "r_knee": (45 + 20 * a * s, 0, 0)}


UPPER_PATTERNS = {"raise": _raise, "swing": _swing, "reach": _reach}
LOWER_PATTERNS = {"walk": _walk, "squat": _squat, "lunge": _lunge}


def action_name(upper: str, lower: str) -> str:
    return f"{upper}-{lower}"


def parse_action(action: str) -> tuple[str, str]:
    upper, _, lower = action.partition("-")
    return upper, lower


@dataclass
class SynthConfig:
    n_subjects: int = 5
    upper_patterns: tuple[str, ...] = ("raise", "swing")
    lower_patterns: tuple[str, ...] = ("walk", "squat")
    # "all" renders every combination, "diagonal" pairs the i-th upper with the i-th lower
    combos: str | tuple[tuple[str, str], ...] = "all"
    frames: int = 500
    n_cameras: int = 4
    noise_px: float = 2.0
    angle_jitter_deg: float = 3.0
    image_width: float = 1000.0
    image_height: float = 1000.0
    focal: float = 1145.0
    camera_distance: float = 5000.0
    camera_height: float = 1500.0
    skeleton: SkeletonSpec = field(default=H36M_17)

    def __post_init__(self):
        self.upper_patterns = tuple(self.upper_patterns)
        self.lower_patterns = tuple(self.lower_patterns)
        for p in self.upper_patterns:
            if p not in UPPER_PATTERNS:
                raise ValueError(f"unknown upper-body pattern {p!r}; known: {sorted(UPPER_PATTERNS)}")
        for p in self.lower_patterns:
            if p not in LOWER_PATTERNS:
                raise ValueError(f"unknown lower-body pattern {p!r}; known: {sorted(LOWER_PATTERNS)}")
        missing = [n for n in self.skeleton.names if n != self.skeleton.names[self.skeleton.root]
                   and n not in REST_DIRECTIONS]
        if missing:
            raise ValueError(f"no rest direction known for joints {missing}")
        if self.n_subjects < 1 or self.frames < 1 or self.n_cameras < 1:
            raise ValueError("n_subjects, frames and n_cameras must all be >= 1")
        if self.noise_px < 0:
            raise ValueError("noise_px must be >= 0")

    def combinations(self) -> list[tuple[str, str]]:
        if self.combos == "all":
            return [(u, l) for u in self.upper_patterns for l in self.lower_patterns]
        if self.combos == "diagonal":
            return list(zip(self.upper_patterns, self.lower_patterns))
        return [tuple(c) for c in self.combos]

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.image_width / 2, self.image_height / 2)


def camera_ring(n: int, distance: float, height: float, target_height: float = 950.0):
    """World-to-camera rotations and centres for ``n`` cameras evenly spaced on a circle."""
    cams = []
    for i in range(n):
        az = np.deg2rad(45.0 + 360.0 * i / n)
        centre = np.array([distance * np.sin(az), height, distance * np.cos(az)])
        forward = np.array([0.0, target_height, 0.0]) - centre
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        cams.append((np.stack([right, down, forward]), centre))
    return cams


def _bone_offsets(skeleton: SkeletonSpec, lengths: np.ndarray) -> np.ndarray:
    offsets = np.zeros((skeleton.n_joints, 3))
    for j, name in enumerate(skeleton.names):
        if j != skeleton.root:
            offsets[j] = np.asarray(REST_DIRECTIONS[name], dtype=np.float64) * lengths[j]
    return offsets


def _topological(skeleton: SkeletonSpec) -> list[int]:
    order, placed = [skeleton.root], {skeleton.root}
    while len(order) < skeleton.n_joints:
        for j, p in enumerate(skeleton.parents):
            if j not in placed and p in placed:
                order.append(j)
                placed.add(j)
    return order


def forward_kinematics(skeleton: SkeletonSpec, offsets: np.ndarray, local: np.ndarray,
                       root_rot: np.ndarray) -> np.ndarray:
    """Root-relative joint positions [F, N, 3] from local rotations [F, N, 3, 3]."""
    F, N = local.shape[:2]
    glob = np.zeros((F, N, 3, 3))
    pos = np.zeros((F, N, 3))
    for j in _topological(skeleton):
        p = skeleton.parents[j]
        if j == skeleton.root:
            glob[:, j] = root_rot @ local[:, j]
        else:
            glob[:, j] = glob[:, p] @ local[:, j]
            pos[:, j] = pos[:, p] + glob[:, p] @ offsets[j]
    return pos


def _subject_lengths(skeleton: SkeletonSpec, rng: np.random.Generator) -> np.ndarray:
    base = np.asarray(skeleton.bone_lengths, dtype=np.float64)
    factor = rng.uniform(0.95, 1.05, size=skeleton.n_joints)
    for a, b in skeleton.mirror_pairs:
        factor[b] = factor[a]
    return base * factor * rng.uniform(0.9, 1.1)


def _clip_angles(cfg: SynthConfig, upper: str, lower: str, rng: np.random.Generator) -> np.ndarray:
    sk = cfg.skeleton
    F = cfg.frames
    period = rng.uniform(40.0, 90.0)
    phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(F) / period
    angles = np.zeros((F, sk.n_joints, 3))
    index = {n: j for j, n in enumerate(sk.names)}
    for pattern, amp in ((UPPER_PATTERNS[upper], rng.uniform(0.8, 1.2)),
                         (LOWER_PATTERNS[lower], rng.uniform(0.8, 1.2))):
        for name, (rx, ry, rz) in pattern(phase, amp).items():
            if name in index:
                angles[:, index[name]] = np.stack(np.broadcast_arrays(rx, ry, rz, phase)[:3], axis=-1)
    # small torso sway and per-frame jitter on every joint
    for name, scale in (("spine", 6.0), ("thorax", 4.0), ("neck", 8.0)):
        if name in index:
            angles[:, index[name], 0] += scale * np.sin(phase * 0.5 + rng.uniform(0, 2 * np.pi))
            angles[:, index[name], 2] += 0.5 * scale * np.sin(phase * 0.5 + rng.uniform(0, 2 * np.pi))
    angles += rng.normal(0.0, cfg.angle_jitter_deg, size=angles.shape)
    return angles


def synth_generate(cfg: SynthConfig, seed: int) -> PoseDataset:
    """Render a dataset; identical (config, seed) pairs give bit-identical output."""
    rng = np.random.default_rng(seed)
    sk = cfg.skeleton
    intr = cfg.intrinsics()
    cams = camera_ring(cfg.n_cameras, cfg.camera_distance, cfg.camera_height)
    feet = [j for j, n in enumerate(sk.names) if n.endswith("ankle")]
    kps, poses, roots, subj, act, cam_ids, frames = [], [], [], [], [], [], []
    for s in range(cfg.n_subjects):
        offsets = _bone_offsets(sk, _subject_lengths(sk, rng))
        for upper, lower in cfg.combinations():
            angles = _clip_angles(cfg, upper, lower, rng)
            local = Rotation.from_euler("xyz", angles.reshape(-1, 3), degrees=True).as_matrix()
            local = local.reshape(cfg.frames, sk.n_joints, 3, 3)
            yaw = rng.uniform(0, 360) + np.linspace(0, rng.uniform(-40, 40), cfg.frames)
            root_rot = Rotation.from_euler("y", yaw, degrees=True).as_matrix()
            rel = forward_kinematics(sk, offsets, local, root_rot)
            ground = rel[:, feet, 1].min(axis=1) if feet else rel[:, :, 1].min(axis=1)
            origin = np.array([rng.uniform(-400, 400), 0.0, rng.uniform(-400, 400)])
            world = rel + origin
            world[..., 1] -= ground[:, None] - 60.0
            for c, (R, centre) in enumerate(cams):
                cam_pts = (world - centre) @ R.T
                kp = project(cam_pts, intr, sk.names)
                if cfg.noise_px > 0:
                    kp = kp + rng.normal(0.0, cfg.noise_px, size=kp.shape)
                kps.append(kp)
                poses.append(cam_pts - cam_pts[:, sk.root:sk.root + 1])
                roots.append(cam_pts[:, sk.root])
                subj += [f"S{s + 1}"] * cfg.frames
                act += [action_name(upper, lower)] * cfg.frames
                cam_ids += [f"C{c + 1}"] * cfg.frames
                frames.append(np.arange(cfg.frames))
    m = len(subj)
    size = np.tile([cfg.image_width, cfg.image_height], (m, 1))
    if m == 0:
        return PoseDataset.empty(sk)
    return PoseDataset(sk, np.concatenate(kps), np.concatenate(poses), size, subj, act, cam_ids,
                       np.concatenate(frames), np.concatenate(roots))


def compositional_split(dataset: PoseDataset, upper_patterns=None, lower_patterns=None):
    """Split into matched (i-th upper with i-th lower) and crossed combinations.

    With upper {A, B} and lower {A, B} the train set holds AA and BB, the
    test set AB and BA. Frames whose action is neither are dropped.
    """
    ups = [parse_action(a)[0] for a in dataset.action]
    lows = [parse_action(a)[1] for a in dataset.action]
    upper_patterns = list(upper_patterns or dict.fromkeys(ups))
    lower_patterns = list(lower_patterns or dict.fromkeys(lows))
    if len(upper_patterns) != len(lower_patterns):
        raise ValueError("need as many upper as lower patterns to pair them")
    up_rank = {p: i for i, p in enumerate(upper_patterns)}
    low_rank = {p: i for i, p in enumerate(lower_patterns)}
    train, test = [], []
    for i, (u, l) in enumerate(zip(ups, lows)):
        if u not in up_rank or l not in low_rank:
            continue
        (train if up_rank[u] == low_rank[l] else test).append(i)
    return dataset.subset(train), dataset.subset(test)
