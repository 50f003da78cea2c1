"""
BVH reading and writing.

Rotations are converted between the file's per-joint Euler channels
(degrees, intrinsic, in channel order) and Rot6D. The root world position
is its OFFSET plus its position channels; everything is scaled by
unit_scale into centimetres on the way in and back on the way out.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import (
    BVHParseError, BVHWriteError, DatasetError, DegenerateRotationError, UnsupportedChannelError,
)
from app.core.geometry import euler_to_matrix, matrix_to_euler, matrix_to_rot6d, rot6d_to_matrix
from app.schemas.motion import Joint, MotionClip, Skeleton

ROTATION_CHANNELS = {"Xrotation": "X", "Yrotation": "Y", "Zrotation": "Z"}
POSITION_CHANNELS = {"Xposition": 0, "Yposition": 1, "Zposition": 2}
FOOT_MARKERS = ("foot", "toe")


@dataclass
class _Token:
    text: str
    line: int
    column: int


@dataclass
class _JointDraft:
    name: str
    parent: Optional[int]
    line: int
    offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    channels: List[str] = field(default_factory=list)
    end_site: Optional[Tuple[float, float, float]] = None


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        column = 0
        for part in line.split():
            column = line.index(part, column)
            tokens.append(_Token(part, line_no, column + 1))
            column += len(part)
    return tokens


class _Reader:
    def __init__(self, tokens: List[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Optional[_Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self, what: str) -> _Token:
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else _Token("", 0, 0)
            raise BVHParseError(f"unexpected end of file, expected {what}", last.line, last.column)
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.next(f"'{text}'")
        if tok.text != text:
            raise BVHParseError(f"expected '{text}', found '{tok.text}'", tok.line, tok.column)
        return tok

    def number(self, what: str) -> float:
        tok = self.next(what)
        try:
            value = float(tok.text)
        except ValueError:
            raise BVHParseError(f"expected {what}, found '{tok.text}'", tok.line, tok.column) from None
        if not np.isfinite(value):
            raise BVHParseError(f"non-finite {what}", tok.line, tok.column)
        return value

    def integer(self, what: str) -> int:
        tok = self.next(what)
        try:
            return int(tok.text)
        except ValueError:
            raise BVHParseError(f"expected {what}, found '{tok.text}'", tok.line, tok.column) from None

    def vec3(self, what: str) -> Tuple[float, float, float]:
        return (self.number(what), self.number(what), self.number(what))


def _parse_hierarchy(reader: _Reader) -> List[_JointDraft]:
    """Iterative descent over ROOT / JOINT / End Site blocks."""
    reader.expect("HIERARCHY")
    tok = reader.expect("ROOT")
    drafts = [_JointDraft(name=reader.next("joint name").text, parent=None, line=tok.line)]
    reader.expect("{")
    # open blocks as (joint index, inside that joint's End Site)
    stack = [(0, False)]
    while stack:
        tok = reader.next("'}' or a joint property")
        current, in_end_site = stack[-1]
        if tok.text == "}":
            stack.pop()
        elif tok.text == "OFFSET":
            offset = reader.vec3("OFFSET value")
            if in_end_site:
                drafts[current].end_site = offset
            else:
                drafts[current].offset = offset
        elif tok.text == "CHANNELS" and not in_end_site:
            count = reader.integer("channel count")
            if count < 0 or count > 6:
                raise BVHParseError(f"channel count {count} outside 0..6", tok.line, tok.column)
            drafts[current].channels = [reader.next("channel name").text for _ in range(count)]
        elif tok.text == "JOINT" and not in_end_site:
            drafts.append(_JointDraft(name=reader.next("joint name").text, parent=current, line=tok.line))
            reader.expect("{")
            stack.append((len(drafts) - 1, False))
        elif tok.text == "End" and not in_end_site:
            reader.expect("Site")
            reader.expect("{")
            stack.append((current, True))
        else:
            raise BVHParseError(f"unexpected token '{tok.text}'", tok.line, tok.column)
    return drafts


def _channel_layout(draft: _JointDraft, is_root: bool) -> Tuple[str, List[int], List[int]]:
    """Rotation order, offsets of rotation channels and of X/Y/Z position channels within the joint."""
    order, rot_idx = "", []
    pos_idx = [-1, -1, -1]
    for i, name in enumerate(draft.channels):
        if name in ROTATION_CHANNELS:
            order += ROTATION_CHANNELS[name]
            rot_idx.append(i)
        elif name in POSITION_CHANNELS:
            if not is_root:
                raise UnsupportedChannelError(name, draft.name, draft.line)
            pos_idx[POSITION_CHANNELS[name]] = i
        else:
            raise UnsupportedChannelError(name, draft.name, draft.line)
    if rot_idx and sorted(order) != ["X", "Y", "Z"]:
        raise BVHParseError(f"joint '{draft.name}' needs one rotation channel per axis, got '{order}'", draft.line, 1)
    if is_root and not rot_idx:
        raise BVHParseError(f"root '{draft.name}' has no rotation channels", draft.line, 1)
    positions = [p for p in pos_idx if p >= 0]
    if positions and len(positions) != 3:
        raise BVHParseError(f"root '{draft.name}' needs all three position channels", draft.line, 1)
    if len(rot_idx) + len(positions) != len(draft.channels):
        raise BVHParseError(f"joint '{draft.name}' repeats a channel", draft.line, 1)
    return order or "ZYX", rot_idx, pos_idx if positions else []


def _foot_joints(skeleton_joints: List[Joint], parents: List[Optional[int]]) -> List[int]:
    feet = [i for i, j in enumerate(skeleton_joints)
            if i > 0 and any(m in j.name.lower() for m in FOOT_MARKERS)]
    if feet:
        return feet
    has_child = {p for p in parents if p is not None}
    return [i for i in range(1, len(skeleton_joints)) if i not in has_child]


def parse_bvh(text: Union[str, bytes], unit_scale: float = 1.0) -> Tuple[Skeleton, MotionClip]:
    """
    Parse a HIERARCHY + MOTION document. Raw bytes must be UTF-8.

    Grammar problems raise BVHParseError with line and column; unknown
    channels or position channels below the root raise
    UnsupportedChannelError.
    """
    if not unit_scale > 0.0:
        raise BVHParseError(f"unit scale must be positive, got {unit_scale}")
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            line = text.count(b"\n", 0, exc.start) + 1
            column = exc.start - (text.rfind(b"\n", 0, exc.start) + 1) + 1
            raise BVHParseError("not UTF-8 text", line, column) from None
    tokens = _tokenize(text)
    reader = _Reader(tokens)
    drafts = _parse_hierarchy(reader)

    layouts = [_channel_layout(d, i == 0) for i, d in enumerate(drafts)]
    starts = np.cumsum([0] + [len(d.channels) for d in drafts])
    total_channels = int(starts[-1])

    reader.expect("MOTION")
    reader.expect("Frames:")
    frames_tok = reader.peek()
    frames = reader.integer("frame count")
    if frames < 1:
        raise BVHParseError(f"frame count must be >= 1, got {frames}", frames_tok.line, frames_tok.column)
    reader.expect("Frame")
    time_tok = reader.expect("Time:")
    frame_time = reader.number("frame time")
    if frame_time <= 0.0:
        raise BVHParseError(f"frame time must be positive, got {frame_time}", time_tok.line, time_tok.column)

    rows: List[List[_Token]] = []
    for tok in tokens[reader.pos:]:
        if rows and rows[-1][0].line == tok.line:
            rows[-1].append(tok)
        else:
            rows.append([tok])
    if len(rows) != frames:
        where = rows[-1][-1] if rows else time_tok
        raise BVHParseError(f"header declares {frames} frames, found {len(rows)}", where.line, where.column)
    values = np.empty((frames, total_channels))
    for f, row in enumerate(rows):
        if len(row) != total_channels:
            raise BVHParseError(f"frame {f} has {len(row)} values, expected {total_channels}",
                                row[0].line, row[0].column)
        values[f] = [_Reader([t]).number("channel value") for t in row]

    rotations = np.empty((frames, len(drafts), 3, 3))
    for j, (order, rot_idx, _) in enumerate(layouts):
        if rot_idx:
            angles = values[:, [int(starts[j]) + k for k in rot_idx]]
            rotations[:, j] = euler_to_matrix(angles, order)
        else:
            rotations[:, j] = np.eye(3)
    root_offset = np.array(drafts[0].offset) * unit_scale
    pos_idx = layouts[0][2]
    if pos_idx:
        root = values[:, [int(starts[0]) + k for k in pos_idx]] * unit_scale + root_offset
    else:
        root = np.broadcast_to(root_offset, (frames, 3)).copy()

    try:
        joints = [
            Joint(name=draft.name, parent=draft.parent,
                  offset=tuple(v * unit_scale for v in draft.offset),
                  rotation_order=order,
                  end_site=None if draft.end_site is None else tuple(v * unit_scale for v in draft.end_site))
            for draft, (order, _, _) in zip(drafts, layouts)
        ]
        skeleton = Skeleton(joints=joints, foot_joints=_foot_joints(joints, [d.parent for d in drafts]),
                            unit_scale=unit_scale)
        clip = MotionClip(skeleton=skeleton, frame_rate=1.0 / frame_time, rotations=matrix_to_rot6d(rotations),
                          root_positions=root, times=MotionClip.uniform_times(frames))
    except ValidationError as exc:
        raise BVHParseError(f"invalid skeleton or motion: {exc.errors()[0]['msg']}") from None
    return skeleton, clip


def read_bvh(path: str, unit_scale: float = 1.0) -> Tuple[Skeleton, MotionClip]:
    file = Path(path)
    if not file.is_file():
        raise DatasetError(f"BVH file not found: {path}")
    try:
        raw = file.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read BVH file {path}: {exc.strerror}") from None
    return parse_bvh(raw, unit_scale=unit_scale)


# ============================================================================
# Writing
# ============================================================================

def _fmt(values) -> str:
    return " ".join(f"{v:.6f}" for v in values)


def _channel_names(order: str) -> List[str]:
    return [f"{axis}rotation" for axis in order]


def write_bvh(skeleton: Skeleton, clip: MotionClip) -> str:
    """BVH text with 6-decimal values; each joint keeps its rotation order (ZYX unless parsed otherwise)."""
    if clip.frames < 1:
        raise BVHWriteError("cannot write a clip with no frames")
    if clip.skeleton.num_joints != skeleton.num_joints:
        raise BVHWriteError(f"clip has {clip.skeleton.num_joints} joints, skeleton has {skeleton.num_joints}")
    scale = skeleton.unit_scale
    lines = ["HIERARCHY"]

    def emit(index: int, depth: int) -> None:
        joint = skeleton.joints[index]
        pad = "\t" * depth
        lines.append(f"{pad}{'ROOT' if index == 0 else 'JOINT'} {joint.name}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}\tOFFSET {_fmt(v / scale for v in joint.offset)}")
        if index == 0:
            channels = ["Xposition", "Yposition", "Zposition"] + _channel_names(joint.rotation_order)
        else:
            channels = _channel_names(joint.rotation_order)
        lines.append(f"{pad}\tCHANNELS {len(channels)} {' '.join(channels)}")
        children = skeleton.children(index)
        for child in children:
            emit(child, depth + 1)
        if not children:
            end = joint.end_site if joint.end_site is not None else (0.0, 0.0, 0.0)
            lines.append(f"{pad}\tEnd Site")
            lines.append(f"{pad}\t{{")
            lines.append(f"{pad}\t\tOFFSET {_fmt(v / scale for v in end)}")
            lines.append(f"{pad}\t}}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    try:
        matrices = rot6d_to_matrix(clip.rotations)
    except DegenerateRotationError as exc:
        raise BVHWriteError(f"clip holds a degenerate rotation: {exc}") from exc
    # channel blocks follow the depth-first order of the HIERARCHY section
    order = _depth_first(skeleton)
    root_channels = (clip.root_positions - np.array(skeleton.joints[0].offset)) / scale
    eulers = [matrix_to_euler(matrices[:, j], skeleton.joints[j].rotation_order) for j in order]
    lines.append("MOTION")
    lines.append(f"Frames: {clip.frames}")
    lines.append(f"Frame Time: {1.0 / clip.frame_rate:.8f}")
    for t in range(clip.frames):
        row = [_fmt(root_channels[t])] + [_fmt(e[t]) for e in eulers]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def _depth_first(skeleton: Skeleton) -> List[int]:
    out, stack = [], [0]
    while stack:
        index = stack.pop()
        out.append(index)
        stack.extend(reversed(skeleton.children(index)))
    return out
