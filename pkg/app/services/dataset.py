"""
Dataset assembly: windowing, manifests and conditioning masks.
"""
import json
import re
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from app.core.exceptions import DatasetError
from app.schemas.motion import ClipWindowSpec, MotionClip, Skeleton
from app.services.bvh import read_bvh

JOINT_GROUPS = {
    "left-leg": re.compile(r"^(l|left)[_\s]?(up)?(leg|foot|knee|toe|thigh|shin|hip)", re.IGNORECASE),
    "right-leg": re.compile(r"^(r|right)[_\s]?(up)?(leg|foot|knee|toe|thigh|shin|hip)", re.IGNORECASE),
    "spine": re.compile(r"(spine|chest|neck|head)", re.IGNORECASE),
}


def window_clips(clip: MotionClip, spec: ClipWindowSpec) -> List[MotionClip]:
    """floor((T - window) / stride) + 1 windows, times re-normalized; empty when the clip is too short."""
    if clip.frames < spec.window:
        return []
    count = (clip.frames - spec.window) // spec.stride + 1
    return [clip.slice(i * spec.stride, i * spec.stride + spec.window) for i in range(count)]


def keyframe_positions(frames: int, count: int) -> List[int]:
    """count frame indices spread evenly over [0, frames - 1], first and last included."""
    count = max(1, min(count, frames))
    return sorted(set(int(round(x)) for x in np.linspace(0, frames - 1, count)))


def mask_keyframes(clip: MotionClip, count: int) -> Tuple[MotionClip, List[int]]:
    """Zero rotations and root of every non-keyframe frame."""
    keys = keyframe_positions(clip.frames, count)
    keep = np.zeros(clip.frames, dtype=bool)
    keep[keys] = True
    rotations = np.where(keep[:, None, None], clip.rotations, 0.0)
    root = np.where(keep[:, None], clip.root_positions, 0.0)
    return clip.with_motion(rotations, root), keys


def mask_joints(clip: MotionClip, joints: Sequence[int]) -> MotionClip:
    """Zero the rotations of the given joints in every frame."""
    rotations = clip.rotations.copy()
    rotations[:, list(joints)] = 0.0
    return clip.with_motion(rotations, clip.root_positions.copy())


def joint_group(skeleton: Skeleton, group: str) -> List[int]:
    """Joint indices of a named group ('left-leg', 'right-leg', 'spine') matched by joint name."""
    pattern = JOINT_GROUPS.get(group)
    if pattern is None:
        raise DatasetError(f"unknown joint group '{group}' (expected one of {sorted(JOINT_GROUPS)})")
    joints = [i for i, name in enumerate(skeleton.names) if pattern.search(name)]
    if not joints:
        raise DatasetError(f"no joints of group '{group}' in skeleton {skeleton.names}")
    return joints


def resolve_joints(skeleton: Skeleton, names: Sequence[str]) -> List[int]:
    try:
        return sorted(skeleton.index(n) for n in names)
    except KeyError as exc:
        raise DatasetError(str(exc.args[0])) from None


# ============================================================================
# Manifests
# ============================================================================

def write_manifest(path: str, entries: Sequence[Dict[str, Any]]) -> None:
    """JSON list of {path, class_label}; paths are written relative to the manifest."""
    root = Path(path).resolve().parent
    rows = []
    for entry in entries:
        p = Path(entry["path"]).resolve()
        try:
            rel = p.relative_to(root).as_posix()
        except ValueError:
            rel = p.as_posix()
        rows.append({"path": rel, "class_label": entry.get("class_label")})
    Path(path).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str) -> List[Dict[str, Any]]:
    """Entries with paths resolved against the manifest's directory."""
    manifest = Path(path)
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        rows = json.loads(manifest.read_bytes())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"manifest {path} is not valid JSON: {exc}") from None
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc.strerror}") from None
    if not isinstance(rows, list):
        raise DatasetError("manifest must be a JSON list of {path, class_label} objects")
    entries = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "path" not in row:
            raise DatasetError(f"manifest entry {i} has no 'path'")
        label = row.get("class_label")
        if label is not None and (not isinstance(label, int) or label < 0):
            raise DatasetError(f"manifest entry {i} has invalid class_label {label!r}")
        entries.append({"path": str((manifest.parent / row["path"]).resolve()), "class_label": label})
    return entries


def load_dataset(manifest_path: str, spec: ClipWindowSpec, unit_scale: float = 1.0
                 ) -> Tuple[List[MotionClip], List[int]]:
    """Parse every manifest BVH and cut it into windows; labels follow their source file."""
    clips: List[MotionClip] = []
    labels: List[int] = []
    for entry in load_manifest(manifest_path):
        if not Path(entry["path"]).is_file():
            raise DatasetError(f"manifest references a missing file: {entry['path']}")
        _, clip = read_bvh(entry["path"], unit_scale=unit_scale)
        windows = window_clips(clip, spec)
        clips.extend(windows)
        labels.extend([entry["class_label"] if entry["class_label"] is not None else -1] * len(windows))
    if not clips:
        raise DatasetError(f"manifest {manifest_path} yields no {spec.window}-frame windows")
    return clips, labels
