# app/core/geometry.py
"""
Rotation representations and distances.

Rot6D is the first two columns of a rotation matrix, stacked:
(c1x, c1y, c1z, c2x, c2y, c2z). Matrices are decoded with Gram-Schmidt.

rot6d_to_matrix / geodesic_distance accept numpy arrays or autodiff
Tensors; with Tensors the result stays on the tape. Euler angles (degrees)
and quaternions only appear at the BVH / SLERP boundary and go through
scipy.
"""
from typing import Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.exceptions import DegenerateRotationError, ShapeMismatchError

Array = Union[np.ndarray, Tensor]

MIN_NORM = 1e-8


def _check_degenerate(r6: np.ndarray) -> None:
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    cross = np.linalg.norm(np.cross(a1, a2), axis=-1)
    bad_norm = (n1 <= MIN_NORM) | (n2 <= MIN_NORM)
    bad_parallel = cross <= MIN_NORM * np.maximum(n1 * n2, MIN_NORM)
    bad = bad_norm | bad_parallel
    if np.any(bad):
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        reason = "near-zero column" if np.any(bad_norm) and bad_norm[index] else "parallel columns"
        raise DegenerateRotationError(index, reason)


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def _normalize(v: Tensor) -> Tensor:
    return v / ad.sqrt(ad.sum_(ad.square(v), axis=-1, keepdims=True))


def rot6d_to_matrix(r6: Array) -> Array:
    """(..., 6) -> (..., 3, 3) via Gram-Schmidt on the two stacked columns."""
    is_tensor = isinstance(r6, Tensor)
    t = ad.as_tensor(r6)
    if t.shape[-1] != 6:
        raise ShapeMismatchError("rot6d_to_matrix", t.shape, detail="last axis must be 6")
    _check_degenerate(t.data)
    c1 = _normalize(t[..., 0:3])
    a2 = t[..., 3:6]
    c2 = _normalize(a2 - ad.sum_(c1 * a2, axis=-1, keepdims=True) * c1)
    c3 = _cross(c1, c2)
    matrix = ad.stack([c1, c2, c3], axis=-1)
    return matrix if is_tensor else matrix.data


def matrix_to_rot6d(matrix: Array) -> Array:
    """(..., 3, 3) -> (..., 6): first two columns."""
    if isinstance(matrix, Tensor):
        return ad.concat([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-2:] != (3, 3):
        raise ShapeMismatchError("matrix_to_rot6d", matrix.shape)
    return np.concatenate([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)


def geodesic_distance(r1: Array, r2: Array) -> Array:
    """Angle of R1 R2^T in radians, arccos((tr(R1 R2^T) - 1) / 2), range [0, pi]."""
    is_tensor = isinstance(r1, Tensor) or isinstance(r2, Tensor)
    a, b = ad.as_tensor(r1), ad.as_tensor(r2)
    if a.shape[-2:] != (3, 3) or b.shape[-2:] != (3, 3):
        raise ShapeMismatchError("geodesic_distance", a.shape, b.shape)
    trace = ad.sum_(a * b, axis=(-2, -1))
    angle = ad.arccos((trace - 1.0) * 0.5)
    return angle if is_tensor else angle.data


def is_rotation(matrix: np.ndarray, atol: float = 1e-9) -> bool:
    matrix = np.asarray(matrix)
    eye = np.broadcast_to(np.eye(3), matrix.shape)
    orthogonal = np.allclose(np.swapaxes(matrix, -1, -2) @ matrix, eye, atol=atol)
    return bool(orthogonal and np.allclose(np.linalg.det(matrix), 1.0, atol=atol))


# ============================================================================
# File-boundary conversions (scipy)
# ============================================================================

def euler_to_matrix(angles_deg: np.ndarray, order: str) -> np.ndarray:
    """Intrinsic Euler angles in degrees, e.g. order 'ZXY' means R = Rz Rx Ry."""
    angles = np.asarray(angles_deg, dtype=np.float64)
    flat = Rotation.from_euler(order.upper(), angles.reshape(-1, 3), degrees=True).as_matrix()
    return flat.reshape(angles.shape[:-1] + (3, 3))


def matrix_to_euler(matrix: np.ndarray, order: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    flat = Rotation.from_matrix(matrix.reshape(-1, 3, 3)).as_euler(order.upper(), degrees=True)
    return flat.reshape(matrix.shape[:-2] + (3,))


def matrix_to_quaternion(matrix: np.ndarray) -> np.ndarray:
    """Scalar-last (x, y, z, w) quaternions."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return Rotation.from_matrix(matrix.reshape(-1, 3, 3)).as_quat().reshape(matrix.shape[:-2] + (4,))


def quaternion_to_matrix(quat: np.ndarray) -> np.ndarray:
    quat = np.asarray(quat, dtype=np.float64)
    return Rotation.from_quat(quat.reshape(-1, 4)).as_matrix().reshape(quat.shape[:-1] + (3, 3))


def rotation_to_rotvec(matrix: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (radians), (..., 3, 3) -> (..., 3)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return Rotation.from_matrix(matrix.reshape(-1, 3, 3)).as_rotvec().reshape(matrix.shape[:-2] + (3,))


def axis_angle_to_matrix(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    rotvec = axis * angle[..., None]
    return Rotation.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(rotvec.shape[:-1] + (3, 3))


def slerp_rotations(key_times: Sequence[float], key_rotations: np.ndarray, query_times: Sequence[float]) -> np.ndarray:
    """
    Spherical interpolation per joint.

    key_rotations: (K, J, 3, 3) at increasing key_times; returns (Q, J, 3, 3).
    Query times outside the key range hold the nearest key.
    """
    key_times = np.asarray(key_times, dtype=np.float64)
    query = np.clip(np.asarray(query_times, dtype=np.float64), key_times[0], key_times[-1])
    key_rotations = np.asarray(key_rotations, dtype=np.float64)
    out = np.empty((len(query), key_rotations.shape[1], 3, 3))
    for j in range(key_rotations.shape[1]):
        if len(key_times) == 1:
            out[:, j] = key_rotations[0, j]
            continue
        interp = Slerp(key_times, Rotation.from_matrix(key_rotations[:, j]))
        out[:, j] = interp(query).as_matrix()
    return out


def lerp_positions(key_times: Sequence[float], key_positions: np.ndarray, query_times: Sequence[float]) -> np.ndarray:
    """Piecewise-linear interpolation of (K, 3) positions."""
    key_positions = np.asarray(key_positions, dtype=np.float64)
    return np.stack(
        [np.interp(query_times, key_times, key_positions[:, d]) for d in range(key_positions.shape[1])],
        axis=-1,
    )
