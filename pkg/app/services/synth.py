"""
Procedural motion for desk-scale training and exact super-resolution ground truth.

Every non-root joint swings about a fixed axis with angle
A_j sin(2 pi f t + phi_j); the root walks along +Z at a class speed and
bobs at twice the class frequency. Classes differ only in frequency and
speed, so a DFT argmax tells them apart.
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigError
from app.core.geometry import axis_angle_to_matrix, matrix_to_rot6d
from app.schemas.motion import Joint, MotionClip, Skeleton, SkeletonSpec

CLASS_FREQUENCIES = (1.0, 2.0)      # Hz
CLASS_SPEEDS = (100.0, 200.0)       # cm/s
BOB_FRACTION = 0.05                 # bob height as a fraction of bone length


def class_frequency(class_id: int) -> float:
    if not 0 <= class_id < len(CLASS_FREQUENCIES):
        raise ConfigError(f"class id must be in [0, {len(CLASS_FREQUENCIES) - 1}], got {class_id}")
    return CLASS_FREQUENCIES[class_id]


def build_skeleton(spec: SkeletonSpec) -> Skeleton:
    """Chain hanging from the root (last joint is the foot) or an 8-joint biped."""
    b = spec.bone_length
    if spec.template == "chain":
        joints = [Joint(name="joint0", parent=None, offset=(0.0, 0.0, 0.0))]
        for i in range(1, spec.joints):
            joints.append(Joint(name=f"joint{i}", parent=i - 1, offset=(0.0, -b, 0.0)))
        joints[-1].end_site = (0.0, -0.5 * b, 0.0)
        return Skeleton(joints=joints, foot_joints=[spec.joints - 1])

    joints = [
        Joint(name="Hips", parent=None),
        Joint(name="LUpLeg", parent=0, offset=(0.5 * b, 0.0, 0.0)),
        Joint(name="LLeg", parent=1, offset=(0.0, -b, 0.0)),
        Joint(name="LFoot", parent=2, offset=(0.0, -b, 0.0), end_site=(0.0, 0.0, 0.5 * b)),
        Joint(name="RUpLeg", parent=0, offset=(-0.5 * b, 0.0, 0.0)),
        Joint(name="RLeg", parent=4, offset=(0.0, -b, 0.0)),
        Joint(name="RFoot", parent=5, offset=(0.0, -b, 0.0), end_site=(0.0, 0.0, 0.5 * b)),
        Joint(name="Spine", parent=0, offset=(0.0, b, 0.0), end_site=(0.0, b, 0.0)),
    ]
    return Skeleton(joints=joints, foot_joints=[3, 6])


def _rest_height(skeleton: Skeleton) -> float:
    """Root height that puts the lowest rest-pose joint on the ground."""
    heights = np.zeros(skeleton.num_joints)
    for j, parent in enumerate(skeleton.parents):
        if parent >= 0:
            heights[j] = heights[parent] + skeleton.joints[j].offset[1]
    return float(-heights.min())


def _joint_motion(spec: SkeletonSpec, num_joints: int, rng: np.random.Generator
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-joint amplitude (rad), phase and unit axis; index 0 (root) is unused."""
    max_angle = np.deg2rad(spec.max_angle_deg) * spec.amplitude_scale
    amplitude = rng.uniform(0.3, 1.0, size=num_joints) * max_angle
    phase = rng.uniform(0.0, 2.0 * np.pi, size=num_joints)
    axes = rng.standard_normal((num_joints, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    if spec.template == "biped":
        # legs swing about the lateral axis; right leg half a cycle behind the left
        sagittal = np.array([1.0, 0.0, 0.0])
        axes[1:7] = sagittal
        phase[4:7] = phase[1:4] + np.pi
    amplitude[0] = 0.0
    return amplitude, phase, axes


def synth_motion(class_id: int, spec: SkeletonSpec, frames: int = 60, frame_rate: float = 60.0, seed: int = 0,
                 sample_times: Optional[Sequence[float]] = None) -> Tuple[Skeleton, MotionClip]:
    """
    One clip of class class_id (0: 1 Hz walk-like, 1: 2 Hz run-like).

    sample_times (seconds) evaluates the same analytic motion at arbitrary
    instants; the returned clip then has one frame per sample and uniform
    normalized times.
    """
    freq = class_frequency(class_id)
    skeleton = build_skeleton(spec)
    rng = np.random.default_rng(seed)
    amplitude, phase, axes = _joint_motion(spec, skeleton.num_joints, rng)

    if sample_times is None:
        t = np.arange(frames, dtype=np.float64) / frame_rate
    else:
        t = np.asarray(sample_times, dtype=np.float64).reshape(-1)
    if t.size < 1:
        raise ConfigError("synth_motion needs at least one frame")

    angles = amplitude[None, :] * np.sin(2.0 * np.pi * freq * t[:, None] + phase[None, :])
    matrices = axis_angle_to_matrix(np.broadcast_to(axes, angles.shape + (3,)), angles)

    bob_height = BOB_FRACTION * spec.bone_length * spec.amplitude_scale
    root = np.zeros((t.size, 3))
    root[:, 1] = _rest_height(skeleton) + bob_height * 0.5 * (1.0 - np.cos(2.0 * np.pi * 2.0 * freq * t))
    root[:, 2] = CLASS_SPEEDS[class_id] * spec.amplitude_scale * t

    clip = MotionClip(skeleton=skeleton, frame_rate=frame_rate, rotations=matrix_to_rot6d(matrices),
                      root_positions=root, times=MotionClip.uniform_times(t.size))
    return skeleton, clip
