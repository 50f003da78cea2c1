# app/services/params_io.py
"""
PeriodicParams files.

CSV:     "# phasekit-params f_max=<float> window_sec=<float>"
         "channel,s,a,f,b" then one row per channel (repr floats, exact round trip)
binary:  b"PHSP" | u32 channels | f64 f_max | f64 window_sec | channels x 4 f64 (little-endian)
"""
import struct
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import ParamsError
from app.schemas.phase import PeriodicParams

CSV_MAGIC = "# phasekit-params"
CSV_COLUMNS = "channel,s,a,f,b"
BIN_MAGIC = b"PHSP"
_BIN_PREFIX = struct.Struct("<4sIdd")


def params_to_csv(params: PeriodicParams) -> str:
    lines = [f"{CSV_MAGIC} f_max={params.f_max!r} window_sec={params.window_sec!r}", CSV_COLUMNS]
    for c, row in enumerate(params.to_array()):
        lines.append(",".join([str(c)] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def params_from_csv(text: str) -> PeriodicParams:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or not lines[0].startswith(CSV_MAGIC) or lines[1] != CSV_COLUMNS:
        raise ParamsError("not a phasekit params CSV (missing header)")
    try:
        fields = dict(item.split("=", 1) for item in lines[0][len(CSV_MAGIC):].split())
        f_max, window = float(fields["f_max"]), float(fields["window_sec"])
        rows = [[float(v) for v in ln.split(",")[1:]] for ln in lines[2:]]
    except (KeyError, ValueError) as exc:
        raise ParamsError(f"malformed params CSV: {exc}") from None
    if not rows or any(len(r) != 4 for r in rows):
        raise ParamsError("params CSV needs at least one row of 4 values (s, a, f, b)")
    return _build(np.array(rows), f_max, window)


def params_to_bytes(params: PeriodicParams) -> bytes:
    values = np.ascontiguousarray(params.to_array(), dtype="<f8")
    return _BIN_PREFIX.pack(BIN_MAGIC, params.channels, params.f_max, params.window_sec) + values.tobytes()


def params_from_bytes(raw: bytes) -> PeriodicParams:
    if len(raw) < _BIN_PREFIX.size:
        raise ParamsError("params file too short")
    magic, channels, f_max, window = _BIN_PREFIX.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise ParamsError(f"not a phasekit params file (bad magic {magic!r})")
    body = raw[_BIN_PREFIX.size:]
    if len(body) != channels * 4 * 8:
        raise ParamsError(f"params body has {len(body)} bytes, expected {channels * 32}")
    return _build(np.frombuffer(body, dtype="<f8").reshape(channels, 4), f_max, window)


def _build(values: np.ndarray, f_max: float, window: float) -> PeriodicParams:
    try:
        return PeriodicParams.from_array(values, f_max=f_max, window_sec=window).check()
    except ValidationError as exc:
        raise ParamsError(f"invalid params: {exc.errors()[0]['msg']}") from None


def write_params(path: str, params: PeriodicParams, fmt: str = "csv") -> None:
    if fmt == "csv":
        Path(path).write_text(params_to_csv(params), encoding="utf-8")
    elif fmt == "bin":
        Path(path).write_bytes(params_to_bytes(params))
    else:
        raise ParamsError(f"unknown params format '{fmt}'")


def read_params(path: str) -> PeriodicParams:
    """Format is picked from the content (binary magic or CSV header)."""
    file = Path(path)
    if not file.is_file():
        raise ParamsError(f"params file not found: {path}")
    raw = file.read_bytes()
    if raw.startswith(BIN_MAGIC):
        return params_from_bytes(raw)
    try:
        return params_from_csv(raw.decode("utf-8"))
    except UnicodeDecodeError:
        raise ParamsError(f"{path} is neither a binary nor a CSV params file") from None
