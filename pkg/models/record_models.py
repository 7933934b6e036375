from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Optional

from models.config_models import ModelDims, Pooler

MODEL_FORMAT_VERSION = "adascan-model/1"


class SampleRecord(BaseModel):
    """One line of a feature-sequence JSONL file."""

    model_config = ConfigDict(extra="forbid")

    id: str
    label: int = Field(ge=0)
    frames: List[List[float]]
    signal_mask: Optional[List[bool]] = None

    @field_validator("frames")
    @classmethod
    def _rectangular(cls, frames):
        if not frames:
            raise ValueError("frames must contain at least one row")
        width = len(frames[0])
        if width == 0:
            raise ValueError("frame rows must be non-empty")
        for t, row in enumerate(frames):
            if len(row) != width:
                raise ValueError(f"ragged frames: row {t} has {len(row)} values, expected {width}")
        return frames

    @model_validator(mode="after")
    def _mask_length(self):
        if self.signal_mask is not None and len(self.signal_mask) != len(self.frames):
            raise ValueError(
                f"signal_mask has length {len(self.signal_mask)}, expected {len(self.frames)}"
            )
        return self


class EpochRecord(BaseModel):
    """One line of the metrics log."""

    epoch: int
    split: str
    accuracy: float
    mean_selected_fraction: float
    signal_gap: Optional[float] = None
    mean_loss: float


class TraceRecord(BaseModel):
    id: str
    label: Optional[int] = None
    pred: int
    gammas: List[float]
    selected: List[bool]
    signal_mask: Optional[List[bool]] = None


class ModelDocument(BaseModel):
    """Serialized ModelParams."""

    version: str = MODEL_FORMAT_VERSION
    pooler: Pooler = "adascan"
    dims: ModelDims
    hyper: dict
    weights: Dict[str, list]

    @field_validator("version")
    @classmethod
    def _known_version(cls, v):
        if v != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format '{v}'")
        return v
