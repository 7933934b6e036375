from pydantic import BaseModel, Field
from typing import Dict, List, Optional

from models.config_models import ModelDims


class ModelInfo(BaseModel):
    path: Optional[str] = None
    pooler: str
    dims: ModelDims
    hyper: Dict


class LoadRequest(BaseModel):
    path: str


class PredictRequest(BaseModel):
    id: str = ""
    frames: List[List[float]] = Field(min_length=1)


class PredictResponse(BaseModel):
    id: str
    pred: int
    probs: List[float]
    gammas: Optional[List[float]] = None


class TraceRequest(PredictRequest):
    label: Optional[int] = Field(default=None, ge=0)
    signal_mask: Optional[List[bool]] = None


class FramePush(BaseModel):
    frame: List[float] = Field(min_length=1)


class ScanStepResponse(BaseModel):
    session: str
    t: int
    gamma: float
    selected: bool
    pred: int
    probs: List[float]
