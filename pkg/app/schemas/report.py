from typing import Any, Dict, List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator


class MetricValue(BaseModel):
    model_config = ConfigDict(extra="forbid")

    value: float = Field(..., description="Finite metric value")
    units: str = Field("", description="e.g. 'cm', 'rad', 'cm/s', 'cm/s^2'")
    notes: List[str] = Field(default_factory=list, description="Flags such as 'no-contact' or 'proxy'")

    @field_validator("value")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("metric values must be finite")
        return float(value)


class MetricReport(BaseModel):
    """Metric name -> value with units, plus run metadata (frames, config hash, ...)."""

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "metrics": {
                    "position_error": {"value": 1.8, "units": "cm", "notes": []},
                    "foot_sliding": {"value": 0.0, "units": "cm/s", "notes": ["no-contact"]},
                },
                "metadata": {"frames": 60, "config_hash": "3f2a..."},
            }
        },
    )

    metrics: Dict[str, MetricValue] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def add(self, name: str, value: float, units: str = "", notes: List[str] = None) -> "MetricReport":
        self.metrics[name] = MetricValue(value=value, units=units, notes=list(notes or []))
        return self

    def value(self, name: str) -> float:
        return self.metrics[name].value

