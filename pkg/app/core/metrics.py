# app/core/metrics.py
"""
Reconstruction, plausibility and generation metrics.

Positions are cm, rotations are Rot6D or 3x3 matrices, frame rates Hz.
"""
from typing import Sequence, Tuple

import numpy as np
from scipy import linalg

from app.core.encodings import _fix_sign
from app.core.exceptions import MetricError
from app.core.geometry import geodesic_distance, rot6d_to_matrix, rotation_to_rotvec
from app.core.kinematics import finite_difference_velocity, foot_report, forward_kinematics
from app.schemas.motion import MotionClip
from app.schemas.report import MetricReport

EIG_FLOOR = 1e-10


def _as_matrices(rotations: np.ndarray) -> np.ndarray:
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.shape[-1] == 6:
        return rot6d_to_matrix(rotations)
    if rotations.shape[-2:] == (3, 3):
        return rotations
    raise MetricError(f"rotations must be (..., 6) or (..., 3, 3), got {rotations.shape}")


def _same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ============================================================================
# Reconstruction
# ============================================================================

def position_error(gt: np.ndarray, pred: np.ndarray) -> float:
    """Mean Euclidean joint distance over (t, j)."""
    gt, pred = np.asarray(gt, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    _same_shape("position_error", gt, pred)
    return float(np.linalg.norm(gt - pred, axis=-1).mean())


def orientation_error(gt_rotations: np.ndarray, pred_rotations: np.ndarray) -> float:
    """Mean geodesic angle (rad) between matching rotations."""
    gt, pred = _as_matrices(gt_rotations), _as_matrices(pred_rotations)
    _same_shape("orientation_error", gt, pred)
    return float(np.mean(geodesic_distance(gt, pred)))


def _power_spectrum(x: np.ndarray) -> np.ndarray:
    """|rfft|^2 along time without the DC bin; x is (T, F) -> (T//2, F)."""
    return np.abs(np.fft.rfft(x, axis=0))[1:] ** 2


def npss(gt: np.ndarray, pred: np.ndarray) -> float:
    """
    Normalized power spectrum similarity of (T, F) feature sequences.

    Per feature: DC-free power spectra normalized to unit mass, cumulative
    sums compared by 1-D earth mover's distance divided by the number of
    bins. Features are averaged with weights equal to their GT power;
    features with zero GT power are skipped. A silent prediction has a
    zero CDF.
    """
    gt, pred = np.asarray(gt, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if gt.ndim == 1:
        gt, pred = gt[:, None], pred[:, None]
    _same_shape("npss", gt, pred)
    if gt.shape[0] < 3:
        raise MetricError("npss needs at least 3 frames")
    p_gt, p_pred = _power_spectrum(gt), _power_spectrum(pred)
    total_gt, total_pred = p_gt.sum(axis=0), p_pred.sum(axis=0)
    keep = total_gt > 0.0
    if not keep.any():
        raise MetricError("npss: every ground-truth feature has zero power")
    n_bins = p_gt.shape[0]
    cdf_gt = np.cumsum(p_gt[:, keep] / total_gt[keep], axis=0)
    safe = np.where(total_pred[keep] > 0.0, total_pred[keep], 1.0)
    cdf_pred = np.cumsum(p_pred[:, keep] / safe, axis=0)
    emd = np.abs(cdf_gt - cdf_pred).sum(axis=0) / n_bins
    return float(np.average(emd, weights=total_gt[keep]))


def acl(positions: np.ndarray, frame_rate: float) -> float:
    """Mean joint acceleration magnitude (cm/s^2) from second central differences."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 3:
        raise MetricError("acl needs at least 3 frames")
    accel = (positions[2:] - 2.0 * positions[1:-1] + positions[:-2]) * frame_rate ** 2
    return float(np.linalg.norm(accel, axis=-1).mean())


def coherence_proxy(positions: np.ndarray, frame_rate: float) -> float:
    """
    Mean over joints of the lag-1 autocorrelation of speed.

    Joints whose speed has no variance count as 1.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 3:
        raise MetricError("coherence needs at least 3 frames")
    speed = np.linalg.norm(np.diff(positions, axis=0) * frame_rate, axis=-1)
    speed = speed.reshape(speed.shape[0], -1)
    values = []
    for j in range(speed.shape[1]):
        x, y = speed[:-1, j], speed[1:, j]
        if x.std() < 1e-12 or y.std() < 1e-12:
            values.append(1.0)
        else:
            values.append(float(np.corrcoef(x, y)[0, 1]))
    return float(np.mean(values))


# ============================================================================
# Generation
# ============================================================================

def diversity(samples: Sequence[np.ndarray]) -> float:
    """Std across samples per dimension and frame, averaged."""
    stacked = np.asarray(samples, dtype=np.float64)
    if stacked.shape[0] < 2:
        raise MetricError("diversity needs at least 2 samples")
    return float(stacked.std(axis=0).mean())


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh((matrix + matrix.T) * 0.5)
    values = np.maximum(values, EIG_FLOOR)
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_from_moments(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """|mu_a - mu_b|^2 + tr(A + B - 2 (A B)^1/2) with (A B)^1/2 taken as (A^1/2 B A^1/2)^1/2."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    root_a = _sqrt_psd(cov_a)
    cross = _sqrt_psd(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Gaussian Frechet distance of two (n, d) feature sets."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"frechet_distance: feature dims differ ({a.shape[1]} vs {b.shape[1]})")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise MetricError(f"frechet_distance needs at least {d + 1} samples per side, got {a.shape[0]}, {b.shape[0]}")
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    return frechet_from_moments(a.mean(axis=0), cov_a, b.mean(axis=0), cov_b)


def pca_project(points: np.ndarray, k: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """(P, D) points -> (P, k) coordinates and the k explained-variance ratios."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise MetricError(f"pca_project expects (P, D) points, got {points.shape}")
    if k < 1 or k > points.shape[1]:
        raise MetricError(f"pca_project: k={k} must be in [1, {points.shape[1]}]")
    if points.shape[0] < k + 1:
        raise MetricError(f"pca_project needs at least {k + 1} points, got {points.shape[0]}")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / (points.shape[0] - 1)
    values, vectors = linalg.eigh(cov)
    order = np.argsort(values)[::-1][:k]
    basis = np.stack([_fix_sign(vectors[:, i]) for i in order], axis=1)
    total = float(np.clip(values, 0.0, None).sum())
    ratios = np.clip(values[order], 0.0, None) / total if total > 0.0 else np.zeros(k)
    return centered @ basis, ratios


# ============================================================================
# Clip features
# ============================================================================

def rotation_features(clip: MotionClip) -> np.ndarray:
    """(T, 3J + 3): joint rotation vectors followed by root velocity (cm/s)."""
    angles = rotation_to_rotvec(rot6d_to_matrix(clip.rotations)).reshape(clip.frames, -1)
    if clip.frames < 2:
        velocity = np.zeros((clip.frames, 3))
    else:
        velocity = finite_difference_velocity(clip.root_positions, clip.times_sec)
    return np.concatenate([angles, velocity], axis=-1)


def _angle_spectrum(clip: MotionClip) -> np.ndarray:
    angles = rotation_to_rotvec(rot6d_to_matrix(clip.rotations)).reshape(clip.frames, -1)
    return np.abs(np.fft.rfft(angles - angles.mean(axis=0), axis=0))


def spectral_features(clip: MotionClip, bins: int = 8) -> np.ndarray:
    """Joint-angle DFT magnitudes of bins 1..bins, averaged over channels."""
    spectrum = _angle_spectrum(clip)[1:bins + 1].mean(axis=1)
    out = np.zeros(bins)
    out[:len(spectrum)] = spectrum
    return out


def dominant_frequency(clip: MotionClip) -> float:
    """Frequency (Hz) of the strongest non-DC bin of the summed joint-angle power."""
    if clip.frames < 4:
        raise MetricError("dominant_frequency needs at least 4 frames")
    power = (_angle_spectrum(clip) ** 2).sum(axis=1)
    k = int(np.argmax(power[1:])) + 1
    return k * clip.frame_rate / clip.frames


def classify_by_frequency(clip: MotionClip, class_frequencies: Sequence[float]) -> int:
    """Index of the class frequency nearest to the clip's dominant frequency."""
    f = dominant_frequency(clip)
    return int(np.argmin([abs(f - c) for c in class_frequencies]))


# ============================================================================
# Reports
# ============================================================================

def evaluate_reconstruction(gt: MotionClip, pred: MotionClip, contact_height: float = 2.0,
                            contact_velocity: float = 2.0) -> MetricReport:
    """Position, orientation, NPSS, ACL, coherence and foot metrics of pred against gt."""
    if gt.frames != pred.frames:
        raise MetricError(f"ground truth has {gt.frames} frames, prediction has {pred.frames}")
    if gt.skeleton.num_joints != pred.skeleton.num_joints:
        raise MetricError(f"ground truth has {gt.skeleton.num_joints} joints, "
                          f"prediction has {pred.skeleton.num_joints}")
    pos_gt = forward_kinematics(gt.skeleton, gt.rotations, gt.root_positions)
    pos_pred = forward_kinematics(gt.skeleton, pred.rotations, pred.root_positions)

    report = MetricReport(metadata={"frames": gt.frames, "joints": gt.skeleton.num_joints,
                                    "frame_rate": gt.frame_rate})
    report.add("position_error", position_error(pos_gt, pos_pred), "cm")
    report.add("orientation_error", orientation_error(gt.rotations, pred.rotations), "rad")
    if gt.frames >= 3:
        try:
            report.add("npss", npss(rotation_features(gt), rotation_features(pred)))
        except MetricError:
            report.add("npss", 0.0, notes=["static-gt"])
        report.add("acl", acl(pos_pred, pred.frame_rate), "cm/s^2")
        report.add("coherence", coherence_proxy(pos_pred, pred.frame_rate), notes=["proxy"])
    feet = gt.skeleton.foot_joints
    if feet:
        for name, entry in foot_report(pos_pred, feet, pred.frame_rate, contact_height, contact_velocity).items():
            report.add(name, entry["value"], entry["units"], entry["notes"])
        gt_feet = foot_report(pos_gt, feet, gt.frame_rate, contact_height, contact_velocity)
        report.add("gt_foot_penetration", gt_feet["foot_penetration"]["value"], "cm")
    return report


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean of every metric over the reports that carry it; independent of report order."""
    if not reports:
        raise MetricError("no reports to merge")
    names = sorted({name for r in reports for name in r.metrics})
    merged = MetricReport(metadata={"reports": len(reports)})
    for name in names:
        entries = [r.metrics[name] for r in reports if name in r.metrics]
        notes = sorted({n for e in entries for n in e.notes})
        merged.add(name, float(np.mean(sorted(e.value for e in entries))), entries[0].units, notes)
    return merged
