# app/core/exceptions.py
"""
Error hierarchy for phasekit.

Every error carries a stable, machine-parsable code. The CLI prints
"<code>: <message>" on one line and exits nonzero.
"""
from typing import Any, Optional


class PhaseKitError(Exception):
    """Base class for all expected failures."""

    code = "E_PHASEKIT"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message


class ShapeMismatchError(PhaseKitError):
    code = "E_SHAPE"

    def __init__(self, op: str, *shapes: Any, detail: str = ""):
        self.op = op
        self.shapes = shapes
        shape_text = ", ".join(str(tuple(s)) for s in shapes)
        suffix = f" ({detail})" if detail else ""
        super().__init__(f"shape mismatch in '{op}': {shape_text}{suffix}")


class NonFiniteError(PhaseKitError):
    code = "E_NONFINITE"

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite output produced by '{op}'")


class DegenerateRotationError(PhaseKitError):
    code = "E_ROT_DEGENERATE"

    def __init__(self, index: tuple, reason: str):
        self.index = index
        # Leading indices are (..., frame, joint) when the input is a clip.
        where = ", ".join(str(i) for i in index) if index else "scalar"
        super().__init__(f"degenerate 6D rotation at index ({where}): {reason}")


class BVHParseError(PhaseKitError):
    code = "E_BVH_PARSE"

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class UnsupportedChannelError(PhaseKitError):
    code = "E_BVH_CHANNEL"

    def __init__(self, channel: str, joint: str = "", line: int = 0):
        self.channel = channel
        self.joint = joint
        self.line = line
        super().__init__(f"unsupported channel '{channel}' on joint '{joint}' (line {line})")


class BVHWriteError(PhaseKitError):
    code = "E_BVH_WRITE"


class GraphError(PhaseKitError):
    code = "E_GRAPH"


class ConfigError(PhaseKitError):
    code = "E_CONFIG"


class CheckpointError(PhaseKitError):
    code = "E_CHECKPOINT"


class DatasetError(PhaseKitError):
    code = "E_DATASET"


class ParamsError(PhaseKitError):
    code = "E_PARAMS"


class MetricError(PhaseKitError):
    code = "E_METRIC"


class OutputExistsError(PhaseKitError):
    code = "E_EXISTS"


class TrainingAborted(PhaseKitError):
    code = "E_TRAIN_ABORT"

    def __init__(self, message: str, step: int, last_good: Optional[Any] = None, state: Optional[Any] = None):
        self.step = step
        self.last_good = last_good
        self.state = state
        super().__init__(f"training aborted at step {step}: {message}")
