"""
Motion data models: skeletons, clips, windows and decoded partial motion.

Positions are centimetres, Y-up, ground plane at y = 0.
"""
import hashlib
import json
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import ShapeMismatchError

Vec3 = Tuple[float, float, float]


class Joint(BaseModel):
    """One joint of a skeleton tree."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., description="Joint name as written in the HIERARCHY block")
    parent: Optional[int] = Field(None, description="Parent index, None for the root")
    offset: Vec3 = Field((0.0, 0.0, 0.0), description="Rest offset from the parent, in cm")
    rotation_order: str = Field("ZYX", description="Euler order of the rotation channels at the file boundary")
    end_site: Optional[Vec3] = Field(None, description="End Site offset for leaf joints, in cm")

    @field_validator("rotation_order")
    @classmethod
    def _valid_order(cls, value: str) -> str:
        value = value.upper()
        if sorted(value) != ["X", "Y", "Z"]:
            raise ValueError(f"rotation order must be a permutation of XYZ, got '{value}'")
        return value


class Skeleton(BaseModel):
    """
    Joint tree in topological order (parent index < child index).

    Exactly one root, at index 0.
    """

    model_config = ConfigDict(extra="forbid")

    joints: List[Joint] = Field(..., min_length=1)
    foot_joints: List[int] = Field(default_factory=list, description="Indices used for contacts and foot metrics")
    unit_scale: float = Field(1.0, gt=0.0, description="File units multiplied by this give cm")

    @model_validator(mode="after")
    def _check_tree(self) -> "Skeleton":
        roots = [i for i, j in enumerate(self.joints) if j.parent is None]
        if roots != [0]:
            raise ValueError(f"skeleton needs exactly one root at index 0, found roots at {roots}")
        for i, joint in enumerate(self.joints[1:], start=1):
            if joint.parent is None or not 0 <= joint.parent < i:
                raise ValueError(f"joint '{joint.name}' has parent {joint.parent}; parents must precede children")
        for f in self.foot_joints:
            if not 0 <= f < len(self.joints):
                raise ValueError(f"foot joint index {f} out of range")
        return self

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> List[str]:
        return [j.name for j in self.joints]

    @property
    def parents(self) -> List[int]:
        return [-1 if j.parent is None else j.parent for j in self.joints]

    @property
    def offsets(self) -> np.ndarray:
        return np.array([j.offset for j in self.joints], dtype=np.float64)

    @property
    def adjacency(self) -> np.ndarray:
        """Symmetric J x J boolean matrix of parent-child edges, zero diagonal."""
        adj = np.zeros((self.num_joints, self.num_joints), dtype=bool)
        for i, joint in enumerate(self.joints):
            if joint.parent is not None:
                adj[i, joint.parent] = True
                adj[joint.parent, i] = True
        return adj

    def children(self, index: int) -> List[int]:
        return [i for i, j in enumerate(self.joints) if j.parent == index]

    def leaves(self) -> List[int]:
        return [i for i in range(self.num_joints) if not self.children(i)]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no joint named '{name}'") from None

    def fingerprint(self) -> str:
        """Stable hash of names, parents and offsets; keys the positional-encoding cache."""
        payload = json.dumps(
            [[j.name, j.parent, [round(v, 9) for v in j.offset]] for j in self.joints]
        )
        return hashlib.sha1(payload.encode("utf-8")).hexdigest()


class MotionClip(BaseModel):
    """
    Fixed-duration window of joint rotations (Rot6D) and root world positions.

    times are normalized to [0, 1]; a uniform clip has times = i / (T - 1).
    """

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    skeleton: Skeleton
    frame_rate: float = Field(..., gt=0.0, description="Frames per second")
    rotations: np.ndarray = Field(..., description="(T, J, 6) local joint rotations")
    root_positions: np.ndarray = Field(..., description="(T, 3) root world positions in cm")
    times: np.ndarray = Field(..., description="(T,) normalized timestamps in [0, 1]")

    @model_validator(mode="after")
    def _check_shapes(self) -> "MotionClip":
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_positions = np.asarray(self.root_positions, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        t = self.rotations.shape[0]
        if self.rotations.shape != (t, self.skeleton.num_joints, 6):
            raise ShapeMismatchError("MotionClip.rotations", self.rotations.shape,
                                     detail=f"expected (T, {self.skeleton.num_joints}, 6)")
        if self.root_positions.shape != (t, 3):
            raise ShapeMismatchError("MotionClip.root_positions", self.root_positions.shape, (t, 3))
        if self.times.shape != (t,):
            raise ShapeMismatchError("MotionClip.times", self.times.shape, (t,))
        if t > 1 and np.any(np.diff(self.times) <= 0.0):
            raise ValueError("clip times must be strictly increasing")
        return self

    @property
    def frames(self) -> int:
        return self.rotations.shape[0]

    @property
    def window_sec(self) -> float:
        """Window duration, frames / frame_rate (60 frames at 60 Hz is 1 s)."""
        return self.frames / self.frame_rate

    @property
    def times_sec(self) -> np.ndarray:
        """Physical timestamps in seconds; frame i of a uniform clip sits at i / frame_rate."""
        if self.frames < 2:
            return np.zeros(self.frames)
        return self.times * (self.frames - 1) / self.frame_rate

    @staticmethod
    def uniform_times(frames: int) -> np.ndarray:
        if frames == 1:
            return np.zeros(1)
        return np.linspace(0.0, 1.0, frames)

    def with_motion(self, rotations: np.ndarray, root_positions: np.ndarray) -> "MotionClip":
        return MotionClip(skeleton=self.skeleton, frame_rate=self.frame_rate,
                          rotations=rotations, root_positions=root_positions, times=self.times.copy())

    def subset(self, indices) -> "MotionClip":
        """Frames at the given indices, keeping their original normalized times."""
        idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=np.int64)
        return MotionClip(skeleton=self.skeleton, frame_rate=self.frame_rate,
                          rotations=self.rotations[idx], root_positions=self.root_positions[idx],
                          times=self.times[idx])

    def slice(self, start: int, stop: int) -> "MotionClip":
        """Contiguous frames [start, stop) with times re-normalized to [0, 1]."""
        return MotionClip(skeleton=self.skeleton, frame_rate=self.frame_rate,
                          rotations=self.rotations[start:stop].copy(),
                          root_positions=self.root_positions[start:stop].copy(),
                          times=MotionClip.uniform_times(stop - start))


class ClipWindowSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    window: int = Field(60, ge=2, description="Window length in frames")
    stride: int = Field(60, ge=1, description="Stride between window starts in frames")


class SkeletonSpec(BaseModel):
    """Template for procedurally generated skeletons."""

    model_config = ConfigDict(extra="forbid")

    template: Literal["chain", "biped"] = "chain"
    joints: int = Field(8, ge=2, description="Joint count for the chain template")
    bone_length: float = Field(10.0, gt=0.0, description="Bone length in cm")
    amplitude_scale: float = Field(1.0, ge=0.0, description="Scales joint angles, bob and translation; 0 is a static pose")
    max_angle_deg: float = Field(30.0, gt=0.0, description="Upper bound of per-joint swing amplitude")


class ContactMask(BaseModel):
    """Per-frame ground contact flags for the designated foot joints."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    mask: np.ndarray = Field(..., description="(T, F) booleans")
    foot_joints: List[int]
    height_threshold: float = Field(2.0, gt=0.0, description="h_c in cm")
    velocity_threshold: float = Field(2.0, gt=0.0, description="v_c in cm/s")

    @property
    def duty_cycle(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


class PartialMotion(BaseModel):
    """Decoder output for a set of (time, joint) queries."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    times: np.ndarray = Field(..., description="(Tq,) normalized query times")
    joints: List[int] = Field(..., description="Queried joint indices")
    rotations: np.ndarray = Field(..., description="(Tq, Jq, 6)")
    root_positions: np.ndarray = Field(..., description="(Tq, 3) in cm")

    def to_clip(self, skeleton: Skeleton, frame_rate: float) -> MotionClip:
        """Full clip with unqueried joints held at the rest pose."""
        rest = identity_rot6d((len(self.times), skeleton.num_joints))
        rest[:, self.joints] = self.rotations
        return MotionClip(skeleton=skeleton, frame_rate=frame_rate, rotations=rest,
                          root_positions=self.root_positions, times=self.times)


def identity_rot6d(shape: Tuple[int, ...]) -> np.ndarray:
    out = np.zeros(tuple(shape) + (6,))
    out[..., 0] = 1.0
    out[..., 4] = 1.0
    return out
