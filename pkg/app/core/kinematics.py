# app/core/kinematics.py
"""
Forward kinematics, foot contacts and the foot plausibility terms.

Ground plane is y = 0. Everything accepts numpy arrays or autodiff Tensors;
forward_kinematics and foot_loss stay on the tape when given Tensors.
"""
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.exceptions import ShapeMismatchError
from app.core.geometry import rot6d_to_matrix
from app.schemas.motion import ContactMask, Skeleton

Array = Union[np.ndarray, Tensor]

SPEED_EPS = 1e-8


def forward_kinematics(skeleton: Skeleton, rotations: Array, root_positions: Array) -> Array:
    """
    World joint positions (T, J, 3).

    rotations are local, either (T, J, 6) Rot6D or (T, J, 3, 3) matrices.
    p_root = root; p_child = p_parent + R_parent_global @ offset_child.
    """
    is_tensor = isinstance(rotations, Tensor) or isinstance(root_positions, Tensor)
    rot = ad.as_tensor(rotations)
    root = ad.as_tensor(root_positions)
    if rot.shape[-1] == 6:
        rot = rot6d_to_matrix(rot)
    frames = root.shape[0]
    if rot.shape != (frames, skeleton.num_joints, 3, 3):
        raise ShapeMismatchError("forward_kinematics", rot.shape, root.shape,
                                 detail=f"skeleton has {skeleton.num_joints} joints")

    offsets = skeleton.offsets
    global_rot: List[Tensor] = []
    positions: List[Tensor] = []
    for j, parent in enumerate(skeleton.parents):
        local = rot[:, j]
        if parent < 0:
            global_rot.append(local)
            positions.append(root)
            continue
        offset = Tensor(offsets[j].reshape(3, 1))
        step = ad.reshape(global_rot[parent] @ offset, (frames, 3))
        positions.append(positions[parent] + step)
        global_rot.append(global_rot[parent] @ local)
    out = ad.stack(positions, axis=1)
    return out if is_tensor else out.data


def finite_difference_velocity(positions: Array, times_sec: Sequence[float]) -> Array:
    """
    d(positions)/dt along axis 0 with central differences on possibly
    non-uniform times; one-sided at both ends.
    """
    is_tensor = isinstance(positions, Tensor)
    x = ad.as_tensor(positions)
    t = np.asarray(times_sec, dtype=np.float64)
    frames = x.shape[0]
    if frames < 2 or t.shape != (frames,):
        raise ShapeMismatchError("finite_difference_velocity", x.shape, t.shape,
                                 detail="need at least 2 frames and one time per frame")
    tail = (1,) * (x.ndim - 1)
    first = (x[1:2] - x[0:1]) / (t[1] - t[0])
    last = (x[frames - 1:frames] - x[frames - 2:frames - 1]) / (t[-1] - t[-2])
    parts = [first]
    if frames > 2:
        dt = (t[2:] - t[:-2]).reshape((frames - 2,) + tail)
        parts.append((x[2:] - x[:-2]) / dt)
    parts.append(last)
    v = ad.concat(parts, axis=0)
    return v if is_tensor else v.data


def uniform_times_sec(frames: int, frame_rate: float) -> np.ndarray:
    return np.arange(frames, dtype=np.float64) / frame_rate


def detect_contacts(positions: np.ndarray, foot_joints: Sequence[int], height_threshold: float = 2.0,
                    velocity_threshold: float = 2.0, frame_rate: float = 60.0,
                    times_sec: Optional[Sequence[float]] = None) -> ContactMask:
    """Contact at frame t iff foot height < h_c and foot speed < v_c."""
    positions = np.asarray(positions, dtype=np.float64)
    feet = list(foot_joints)
    if times_sec is None:
        times_sec = uniform_times_sec(positions.shape[0], frame_rate)
    foot_pos = positions[:, feet]
    if positions.shape[0] < 2:
        speed = np.zeros(foot_pos.shape[:2])
    else:
        speed = np.linalg.norm(finite_difference_velocity(foot_pos, times_sec), axis=-1)
    mask = (foot_pos[..., 1] < height_threshold) & (speed < velocity_threshold)
    return ContactMask(mask=mask, foot_joints=feet, height_threshold=height_threshold,
                       velocity_threshold=velocity_threshold)


def _horizontal_speed(foot_pos: Array, times_sec: Sequence[float]) -> Array:
    v = finite_difference_velocity(foot_pos, times_sec)
    if isinstance(v, Tensor):
        return ad.sqrt(ad.square(v[..., 0]) + ad.square(v[..., 2]))
    return np.hypot(v[..., 0], v[..., 2])


def foot_sliding_penalty(positions: np.ndarray, mask: ContactMask, frame_rate: float = 60.0,
                         times_sec: Optional[Sequence[float]] = None) -> float:
    """Mean horizontal speed (cm/s) of feet over contact frames; 0 without contacts."""
    positions = np.asarray(positions, dtype=np.float64)
    if not mask.mask.any() or positions.shape[0] < 2:
        return 0.0
    if times_sec is None:
        times_sec = uniform_times_sec(positions.shape[0], frame_rate)
    speed = _horizontal_speed(positions[:, mask.foot_joints], times_sec)
    return float(speed[mask.mask].mean())


def foot_penetration_penalty(positions: np.ndarray, foot_joints: Sequence[int]) -> float:
    """Mean over frames and feet of max(0, -height)."""
    positions = np.asarray(positions, dtype=np.float64)
    heights = positions[:, list(foot_joints), 1]
    if heights.size == 0:
        return 0.0
    return float(np.maximum(0.0, -heights).mean())


def foot_loss(pred_positions: Array, gt_positions: np.ndarray, mask: ContactMask,
              times_sec: Sequence[float]) -> Array:
    """
    Squared per-frame differences between prediction and ground truth of
    (a) foot penetration depth and (b) horizontal foot speed on GT contact
    frames, averaged over frames and feet.
    """
    feet = mask.foot_joints
    pred = ad.as_tensor(pred_positions)
    gt = np.asarray(gt_positions, dtype=np.float64)
    pred_feet = ad.take(pred, feet, axis=1)
    gt_feet = gt[:, feet]

    pen_pred = ad.relu(-pred_feet[..., 1])
    pen_gt = np.maximum(0.0, -gt_feet[..., 1])
    penetration = ad.mean(ad.square(pen_pred - pen_gt))

    v_pred = finite_difference_velocity(pred_feet, times_sec)
    v_gt = finite_difference_velocity(gt_feet, times_sec)
    speed_pred = ad.sqrt(ad.square(v_pred[..., 0]) + ad.square(v_pred[..., 2]) + SPEED_EPS)
    speed_gt = np.sqrt(v_gt[..., 0] ** 2 + v_gt[..., 2] ** 2 + SPEED_EPS)
    grounded = mask.mask.astype(np.float64)
    sliding = ad.mean(ad.square(speed_pred - speed_gt) * grounded)
    return penetration + sliding


def foot_report(positions: np.ndarray, foot_joints: Sequence[int], frame_rate: float,
                height_threshold: float = 2.0, velocity_threshold: float = 2.0) -> Dict[str, dict]:
    """Sliding and penetration with metadata notes."""
    mask = detect_contacts(positions, foot_joints, height_threshold, velocity_threshold, frame_rate)
    sliding_notes = [] if mask.mask.any() else ["no-contact"]
    return {
        "foot_sliding": {
            "value": foot_sliding_penalty(positions, mask, frame_rate),
            "units": "cm/s",
            "notes": sliding_notes,
        },
        "foot_penetration": {
            "value": foot_penetration_penalty(positions, foot_joints),
            "units": "cm",
            "notes": [],
        },
        "contact_duty_cycle": {"value": mask.duty_cycle, "units": "", "notes": []},
    }
