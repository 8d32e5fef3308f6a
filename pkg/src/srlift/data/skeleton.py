from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint names, kinematic tree and left/right mirror pairs."""

    names: tuple[str, ...]
    parents: tuple[int, ...]
    mirror_pairs: tuple[tuple[int, int], ...]
    bone_lengths: tuple[float, ...]
    root: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "mirror_pairs", tuple((int(a), int(b)) for a, b in self.mirror_pairs))
        object.__setattr__(self, "bone_lengths", tuple(float(x) for x in self.bone_lengths))
        n = len(self.names)
        if len(self.parents) != n or len(self.bone_lengths) != n:
            raise ValueError("names, parents and bone_lengths must have one entry per joint")
        if self.parents[self.root] != -1:
            raise ValueError(f"root joint {self.root} must have parent -1")
        for j, p in enumerate(self.parents):
            if j != self.root and not 0 <= p < n:
                raise ValueError(f"joint {j} has invalid parent {p}")
        for j in range(n):
            seen, k = set(), j
            while k != self.root:
                if k in seen:
                    raise ValueError(f"parent graph has a cycle through joint {j}")
                seen.add(k)
                k = self.parents[k]
        flat = [j for pair in self.mirror_pairs for j in pair]
        if len(set(flat)) != len(flat) or any(not 0 <= j < n for j in flat):
            raise ValueError("mirror pairs must be disjoint joint indices")

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def mirror_permutation(self) -> np.ndarray:
        """``perm[j]`` is the mirror partner of joint ``j`` (itself on the midline)."""
        perm = np.arange(self.n_joints)
        for a, b in self.mirror_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> dict:
        return {"names": list(self.names), "parents": list(self.parents),
                "mirror_pairs": [list(p) for p in self.mirror_pairs],
                "bone_lengths": list(self.bone_lengths), "root": self.root}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(names=tuple(d["names"]), parents=tuple(d["parents"]),
                   mirror_pairs=tuple(tuple(p) for p in d["mirror_pairs"]),
                   bone_lengths=tuple(d["bone_lengths"]), root=int(d.get("root", 0)))


H36M_17 = SkeletonSpec(
    names=("pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine", "thorax",
           "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist"),
    parents=(-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15),
    mirror_pairs=((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16)),
    bone_lengths=(0.0, 132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0,
                  151.0, 278.0, 251.0, 151.0, 278.0, 251.0),
)
