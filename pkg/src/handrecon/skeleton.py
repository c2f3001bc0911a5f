"""21-joint hand topology, canonical rest pose and bone-length utilities.

Joint order follows the COCO-WholeBody hand convention (0-based):

    ====  ==========  ====  ==========  ====  ==========
    idx   joint       idx   joint       idx   joint
    ====  ==========  ====  ==========  ====  ==========
    0     wrist       7     index_dip   14    ring_pip
    1     thumb_cmc   8     index_tip   15    ring_dip
    2     thumb_mcp   9     middle_mcp  16    ring_tip
    3     thumb_ip    10    middle_pip  17    little_mcp
    4     thumb_tip   11    middle_dip  18    little_pip
    5     index_mcp   12    middle_tip  19    little_dip
    6     index_pip   13    ring_mcp    20    little_tip
    ====  ==========  ====  ==========  ====  ==========
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import UnobservedBone

WRIST = 0
NUM_JOINTS = 21

JOINT_NAMES: tuple[str, ...] = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "little_mcp", "little_pip", "little_dip", "little_tip",
)

FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")


@dataclass(frozen=True)
class SkeletonDef:
    joint_names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]  # (parent, child)
    finger_chains: tuple[tuple[int, int, int, int], ...]
    name: str = "hand21"

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def bone_array(self) -> np.ndarray:
        return np.array(self.bones, dtype=np.intp)

    def validate(self) -> None:
        n = self.joint_count
        if n != NUM_JOINTS or len(self.bones) != NUM_JOINTS - 1:
            raise ValueError("hand skeleton must have 21 joints and 20 bones")
        children = [k for _, k in self.bones]
        if sorted(children) != list(range(1, n)):
            raise ValueError("every non-wrist joint must be the child of exactly one bone")
        # n-1 edges + every joint reachable from the wrist => tree
        adj = {j: [] for j in range(n)}
        for j, k in self.bones:
            adj[j].append(k)
        seen, stack = {WRIST}, [WRIST]
        while stack:
            for k in adj[stack.pop()]:
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
        if len(seen) != n:
            raise ValueError("bone graph is not connected")

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "joint_names": list(self.joint_names),
                "bones": [list(b) for b in self.bones],
                "finger_chains": [list(c) for c in self.finger_chains],
            },
            indent=2,
        )


def _build_hand21() -> SkeletonDef:
    chains = tuple(tuple(range(1 + 4 * f, 5 + 4 * f)) for f in range(5))
    bones = []
    for chain in chains:
        bones.append((WRIST, chain[0]))
        bones.extend(zip(chain[:-1], chain[1:]))
    return SkeletonDef(JOINT_NAMES, tuple(bones), chains)


HAND21 = _build_hand21()


@dataclass(frozen=True, eq=False)
class HandPose3D:
    """21 joint positions (mm) and a per-joint validity mask.

    Invalid joints hold NaN and are ignored by every loss and metric.
    """

    joints: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        joints = np.array(self.joints, dtype=np.float64).reshape(NUM_JOINTS, 3)
        if self.valid is None:
            valid = np.all(np.isfinite(joints), axis=1)
        else:
            valid = np.array(self.valid, dtype=bool).reshape(NUM_JOINTS)
        if not np.all(np.isfinite(joints[valid])):
            raise ValueError("valid joints must be finite")
        joints[~valid] = np.nan
        joints.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "valid", valid)

    def with_joints(self, joints: np.ndarray) -> "HandPose3D":
        return HandPose3D(joints, self.valid)

    def transformed(self, R: np.ndarray, t: np.ndarray, scale: float = 1.0) -> "HandPose3D":
        return HandPose3D(scale * self.joints @ np.asarray(R).T + np.asarray(t), self.valid)


@dataclass(frozen=True, eq=False)
class NominalBoneLengths:
    lengths: np.ndarray  # (20,), mm, aligned with SkeletonDef.bones

    def __post_init__(self):
        lengths = np.array(self.lengths, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(lengths)) and np.all(lengths > 0)):
            raise ValueError("nominal bone lengths must be positive and finite")
        lengths.setflags(write=False)
        object.__setattr__(self, "lengths", lengths)


# Flat open right hand, palm in the z = 0 plane, fingers along +y, thumb
# toward -x. Proportions follow adult anthropometric averages (hand length
# ~190 mm wrist to middle fingertip, palm length ~95 mm).
_CANONICAL_XY = (
    (0.0, 0.0),
    (-20.0, 20.0), (-45.0, 50.0), (-60.0, 80.0), (-70.0, 105.0),
    (-25.0, 95.0), (-28.0, 135.0), (-30.0, 160.0), (-31.0, 182.0),
    (-3.0, 95.0), (-3.0, 140.0), (-3.0, 167.0), (-3.0, 190.0),
    (18.0, 92.0), (21.0, 133.0), (23.0, 158.0), (24.0, 180.0),
    (37.0, 83.0), (42.0, 115.0), (45.0, 133.0), (47.0, 150.0),
)


def canonical_hand() -> HandPose3D:
    """Rest pose with the wrist at the origin (see ``_CANONICAL_XY``)."""
    xy = np.array(_CANONICAL_XY)
    return HandPose3D(np.column_stack([xy, np.zeros(NUM_JOINTS)]))


def bone_lengths(pose: HandPose3D, skel: SkeletonDef = HAND21) -> np.ndarray:
    """Per-bone Euclidean lengths; NaN where an endpoint is invalid."""
    b = skel.bone_array
    lengths = np.linalg.norm(pose.joints[b[:, 1]] - pose.joints[b[:, 0]], axis=1)
    lengths[~(pose.valid[b[:, 0]] & pose.valid[b[:, 1]])] = np.nan
    return lengths


def estimate_nominal_lengths(
    poses: Iterable[HandPose3D], skel: SkeletonDef = HAND21
) -> NominalBoneLengths:
    """Per-bone median over all poses in which the bone is fully observed."""
    table = np.array([bone_lengths(p, skel) for p in poses])
    if table.size == 0:
        raise UnobservedBone(list(skel.bones))
    observed = np.isfinite(table)
    missing = [skel.bones[i] for i in np.flatnonzero(~observed.any(axis=0))]
    if missing:
        raise UnobservedBone(missing)
    return NominalBoneLengths(np.nanmedian(table, axis=0))


def stack_poses(poses: Sequence[HandPose3D]) -> tuple[np.ndarray, np.ndarray]:
    """``(T, 21, 3)`` joints and ``(T, 21)`` validity."""
    return np.array([p.joints for p in poses]), np.array([p.valid for p in poses])
