from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple

Pooler = Literal["adascan", "mean", "max", "mil"]
RegKind = Literal["entropy", "l1", "none"]
ImpInput = Literal["residual", "concat"]
DistractorMode = Literal["gaussian", "shared_pool"]
Command = Literal["train", "eval", "trace", "sweep", "gradcheck", "gen-data", "serve"]

POOLERS: Tuple[str, ...] = ("adascan", "mean", "max", "mil")


class ModelDims(BaseModel):
    model_config = ConfigDict(frozen=True)

    D: int = Field(ge=1)
    C: int = Field(ge=2)
    h1: int = Field(default=64, ge=1)
    h2: int = Field(default=32, ge=1)


class HyperParams(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lambda_: float = Field(default=1.0, ge=0.0, alias="lambda")
    lr_pool: float = Field(default=1e-3, gt=0.0)
    lr_classifier: float = Field(default=1e-3, gt=0.0)
    clip_norm: float = Field(default=5.0, gt=0.0)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=32, ge=1)
    dropout_p: float = Field(default=0.0, ge=0.0, lt=1.0)
    reg_kind: RegKind = "entropy"
    hidden: Tuple[int, int] = (64, 32)
    seed: int = 0
    imp_input: ImpInput = "residual"

    @field_validator("hidden")
    @classmethod
    def _positive_hidden(cls, v):
        if min(v) < 1:
            raise ValueError("hidden sizes must be positive")
        return v

    def to_document(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


class SynthConfig(BaseModel):
    """Planted-signal generator settings."""

    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(default=4, ge=2)
    feat_dim: int = Field(default=16, ge=1)
    seq_len: int = Field(default=20, ge=1)
    signal_frames: int = Field(default=3, ge=1)
    signal_noise: float = Field(default=0.1, ge=0.0)
    distractor_mode: DistractorMode = "shared_pool"
    pool_size: int = Field(default=10, ge=1)
    train_count: int = Field(default=500, ge=0)
    test_count: int = Field(default=200, ge=0)
    seed: int = 42

    @model_validator(mode="after")
    def _signal_fits(self):
        if self.signal_frames > self.seq_len:
            raise ValueError(
                f"signal_frames ({self.signal_frames}) cannot exceed seq_len ({self.seq_len})"
            )
        return self


SYNTHETIC_PRESETS: Dict[str, SynthConfig] = {
    "standard": SynthConfig(),
    "standard-k2": SynthConfig(signal_frames=2),
    "default": SynthConfig(train_count=200, test_count=100),
    "tiny": SynthConfig(num_classes=3, feat_dim=8, seq_len=6, signal_frames=2,
                        pool_size=4, train_count=30, test_count=15),
}


class RunConfig(BaseModel):
    """One CLI invocation after flags and config file are merged."""

    command: Command
    pooler: Pooler = "adascan"
    synthetic: Optional[SynthConfig] = None
    data: Optional[str] = None
    test_data: Optional[str] = None
    hyper: HyperParams = HyperParams()
    subsample: Optional[int] = Field(default=None, ge=1)
    subsample_mode: Literal["uniform", "random"] = "uniform"
    out: str = "runs"
    model: Optional[str] = None
    lambda_grid: List[float] = [0.0, 0.1, 1.0, 10.0, 100.0]
    constant_importance: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    test_samples: Optional[int] = Field(default=None, ge=1)
    bars: bool = False
    corrupt_rule: Optional[str] = None
    host: str = "0.0.0.0"
    port: int = 8000
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _one_data_source(self):
        needs_data = self.command in ("train", "eval", "trace", "sweep", "gen-data")
        if needs_data and (self.synthetic is None) == (self.data is None):
            raise ValueError("exactly one of --synthetic or --data is required")
        if self.command == "gen-data" and self.synthetic is None:
            raise ValueError("gen-data requires --synthetic")
        if self.command in ("eval", "trace", "serve") and not self.model:
            raise ValueError(f"{self.command} requires --model")
        if self.test_samples is not None and self.subsample is None:
            raise ValueError("--test-samples needs --subsample N (frames per test view)")
        if self.command == "sweep":
            if not self.lambda_grid:
                raise ValueError("lambda grid must be non-empty")
            if min(self.lambda_grid) < 0:
                raise ValueError("lambda values must be non-negative")
        return self
