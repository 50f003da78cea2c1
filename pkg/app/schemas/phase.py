"""
Periodic latent parameters and their diffusion-space transform.
"""
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ParamsError, ShapeMismatchError

PARAM_TOLERANCE = 1e-9


class LatentCurve(BaseModel):
    """C channels sampled at N uniform points over a window of window_sec seconds."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="(C, N)")
    window_sec: float = Field(..., gt=0.0)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def samples(self) -> int:
        return self.values.shape[1]


class PeriodicParams(BaseModel):
    """
    Per-channel sinusoid (s, a, f, b): phase shift in cycles, amplitude,
    frequency in Hz and offset. This is the whole latent code of a clip.
    """

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    s: np.ndarray = Field(..., description="(C,) phase shift in [0, 1)")
    a: np.ndarray = Field(..., description="(C,) amplitude >= 0")
    f: np.ndarray = Field(..., description="(C,) frequency in Hz, within [0, f_max]")
    b: np.ndarray = Field(..., description="(C,) offset")
    f_max: float = Field(..., gt=0.0, description="Upper frequency bound in Hz")
    window_sec: float = Field(1.0, gt=0.0, description="Duration mapped onto normalized time [0, 1]")

    @model_validator(mode="after")
    def _coerce(self) -> "PeriodicParams":
        self.s = np.asarray(self.s, dtype=np.float64).reshape(-1)
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.f = np.asarray(self.f, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        shapes = {self.s.shape, self.a.shape, self.f.shape, self.b.shape}
        if len(shapes) != 1:
            raise ShapeMismatchError("PeriodicParams", self.s.shape, self.a.shape, self.f.shape, self.b.shape)
        return self

    @property
    def channels(self) -> int:
        return self.s.shape[0]

    def check(self) -> "PeriodicParams":
        """Raise ParamsError unless a >= 0, 0 <= s < 1, 0 <= f <= f_max and all finite."""
        arrays = np.stack([self.s, self.a, self.f, self.b])
        if not np.all(np.isfinite(arrays)):
            raise ParamsError("periodic params contain non-finite values")
        if np.any(self.a < -PARAM_TOLERANCE):
            raise ParamsError(f"negative amplitude {self.a.min():.3g}")
        if np.any(self.s < 0.0) or np.any(self.s >= 1.0):
            raise ParamsError(f"phase shift outside [0, 1): [{self.s.min():.6g}, {self.s.max():.6g}]")
        if np.any(self.f < -PARAM_TOLERANCE) or np.any(self.f > self.f_max + PARAM_TOLERANCE):
            raise ParamsError(f"frequency outside [0, {self.f_max:.6g}]: [{self.f.min():.6g}, {self.f.max():.6g}]")
        return self

    def to_array(self) -> np.ndarray:
        """(C, 4) rows of (s, a, f, b)."""
        return np.stack([self.s, self.a, self.f, self.b], axis=-1)

    @classmethod
    def from_array(cls, values: np.ndarray, f_max: float, window_sec: float = 1.0) -> "PeriodicParams":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != 4:
            raise ShapeMismatchError("PeriodicParams.from_array", values.shape, detail="expected (C, 4)")
        return cls(s=values[:, 0], a=values[:, 1], f=values[:, 2], b=values[:, 3],
                   f_max=f_max, window_sec=window_sec)


class DiffParams(BaseModel):
    """Per-channel (a cos 2pi s, a sin 2pi s, probit frequency, offset), with f_max carried alongside."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="(C, 4)")
    f_max: float = Field(..., gt=0.0)
    window_sec: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _coerce(self) -> "DiffParams":
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 4:
            raise ShapeMismatchError("DiffParams", self.values.shape, detail="expected (C, 4)")
        if not np.all(np.isfinite(self.values)):
            raise ParamsError("diffusion params contain non-finite values")
        return self

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def stack_params(params: Sequence[PeriodicParams]) -> np.ndarray:
    """(B, C, 4) array of (s, a, f, b)."""
    return np.stack([p.to_array() for p in params])


class Condition(BaseModel):
    """Denoiser conditioning: timestep, optional class label, optional encoded partial clip."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    timestep: int = Field(..., ge=0)
    label: Optional[int] = Field(None, ge=0, description="None selects the reserved null class")
    context: Optional[np.ndarray] = Field(None, description="(C, 4) standardized diffusion params of the partial clip")
