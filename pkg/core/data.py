"""Planted-signal sequence generator, JSONL ingestion and temporal subsampling."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from core.errors import AdaScanError, ContractViolation, IngestionError
from core.pooling import FeatureSequence
from models.config_models import SynthConfig
from models.record_models import SampleRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    samples: List[FeatureSequence]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation("a dataset needs at least two classes")
        dims = {s.D for s in self.samples}
        if len(dims) > 1:
            raise ContractViolation(f"samples disagree on feature dimension: {sorted(dims)}")
        for s in self.samples:
            if s.label >= self.num_classes:
                raise ContractViolation(f"sample '{s.id}' has label {s.label} >= C={self.num_classes}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[FeatureSequence]:
        return iter(self.samples)

    @property
    def D(self) -> int:
        if not self.samples:
            raise ContractViolation("empty dataset has no feature dimension")
        return self.samples[0].D

    @property
    def C(self) -> int:
        return self.num_classes

    def map(self, fn) -> "Dataset":
        return Dataset([fn(s) for s in self.samples], self.num_classes, dict(self.meta))


def _class_prototypes(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    """Unit-norm class prototypes, orthonormal while num_classes <= dim."""
    draws = rng.normal(size=(dim, num_classes))
    k = min(dim, num_classes)
    q, _ = np.linalg.qr(draws[:, :k])
    protos = [q[:, c] for c in range(k)]
    for c in range(k, num_classes):
        protos.append(draws[:, c] / np.linalg.norm(draws[:, c]))
    return np.stack(protos)


def _draw_split(name: str, count: int, cfg: SynthConfig, rng: np.random.Generator,
                prototypes: np.ndarray, pool: Optional[np.ndarray]) -> Dataset:
    C, D, T, k = cfg.num_classes, cfg.feat_dim, cfg.seq_len, cfg.signal_frames
    scale = 1.0 / np.sqrt(D)
    labels = rng.permutation(np.arange(count) % C)
    samples = []
    for i, label in enumerate(labels):
        if pool is None:
            frames = rng.normal(0.0, scale, size=(T, D))
        else:
            picks = rng.integers(0, pool.shape[0], size=T)
            frames = pool[picks] + cfg.signal_noise * rng.normal(0.0, scale, size=(T, D))
        positions = rng.choice(T, size=k, replace=False)
        frames[positions] = prototypes[label] + cfg.signal_noise * rng.normal(0.0, scale, size=(k, D))
        mask = np.zeros(T, dtype=bool)
        mask[positions] = True
        samples.append(FeatureSequence(frames, int(label), f"{name}-{i:05d}", tuple(mask.tolist())))
    meta = cfg.model_dump(mode="json")
    meta["split"] = name
    return Dataset(samples, C, meta)


def generate_synthetic(cfg: SynthConfig) -> Tuple[Dataset, Dataset]:
    """Train and test splits of the planted-signal benchmark; deterministic in cfg.seed."""
    if cfg.signal_frames > cfg.seq_len:
        raise ContractViolation("signal_frames cannot exceed seq_len")
    proto_seed, pool_seed, train_seed, test_seed = np.random.SeedSequence(cfg.seed).spawn(4)
    prototypes = _class_prototypes(np.random.default_rng(proto_seed), cfg.num_classes, cfg.feat_dim)
    pool = None
    if cfg.distractor_mode == "shared_pool":
        draws = np.random.default_rng(pool_seed).normal(size=(cfg.pool_size, cfg.feat_dim))
        pool = draws / np.linalg.norm(draws, axis=1, keepdims=True)
    train = _draw_split("train", cfg.train_count, cfg, np.random.default_rng(train_seed), prototypes, pool)
    test = _draw_split("test", cfg.test_count, cfg, np.random.default_rng(test_seed), prototypes, pool)
    logger.debug("generated %d train / %d test sequences (C=%d, D=%d, T=%d)",
                 len(train), len(test), cfg.num_classes, cfg.feat_dim, cfg.seq_len)
    return train, test


def synthetic_prototypes(cfg: SynthConfig) -> np.ndarray:
    """The class prototypes generate_synthetic plants for ``cfg``."""
    proto_seed = np.random.SeedSequence(cfg.seed).spawn(4)[0]
    return _class_prototypes(np.random.default_rng(proto_seed), cfg.num_classes, cfg.feat_dim)


def _record_line(seq: FeatureSequence) -> str:
    record = {"id": seq.id, "label": seq.label, "frames": seq.frames.tolist()}
    if seq.signal_mask is not None:
        record["signal_mask"] = list(seq.signal_mask)
    return json.dumps(record)


def save_jsonl(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for seq in dataset:
            f.write(_record_line(seq) + "\n")
    return path


def load_jsonl(path: Union[str, Path], num_classes: Optional[int] = None) -> Dataset:
    """One FeatureSequence per line; errors name the 1-based line number."""
    path = Path(path)
    samples: List[FeatureSequence] = []
    width = None
    lineno = 0
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = SampleRecord.model_validate(json.loads(line))
            except json.JSONDecodeError as e:
                raise IngestionError(str(path), lineno, f"invalid JSON: {e.msg}") from e
            except ValidationError as e:
                reason = "; ".join(err["msg"] for err in e.errors())
                raise IngestionError(str(path), lineno, reason) from e
            if width is None:
                width = len(record.frames[0])
            elif len(record.frames[0]) != width:
                raise IngestionError(str(path), lineno,
                                     f"feature dimension {len(record.frames[0])} differs from {width}")
            if num_classes is not None and record.label >= num_classes:
                raise IngestionError(str(path), lineno, f"label {record.label} >= C={num_classes}")
            try:
                samples.append(FeatureSequence(np.array(record.frames), record.label, record.id,
                                               record.signal_mask))
            except AdaScanError as e:
                raise IngestionError(str(path), lineno, str(e)) from e
    if not samples:
        raise IngestionError(str(path), max(lineno, 1), "file holds no sequences")
    if num_classes is None:
        num_classes = max([s.label for s in samples] + [1]) + 1
    logger.info("loaded %d sequences from %s", len(samples), path)
    return Dataset(samples, num_classes, {"source": str(path)})


def uniform_subsample(seq: FeatureSequence, n: int) -> FeatureSequence:
    """Frames floor(j*T/n) for j = 0..n-1 (repeats frames when T < n)."""
    if n < 1:
        raise ContractViolation("subsample size must be at least 1")
    return _take(seq, [(j * seq.T) // n for j in range(n)])


def random_subsample(seq: FeatureSequence, n: int, rng: np.random.Generator) -> FeatureSequence:
    """n frames drawn uniformly at random, kept in temporal order."""
    if n < 1:
        raise ContractViolation("subsample size must be at least 1")
    if seq.T < n:
        return uniform_subsample(seq, n)
    return _take(seq, sorted(rng.choice(seq.T, size=n, replace=False).tolist()))


def _take(seq: FeatureSequence, idx: List[int]) -> FeatureSequence:
    mask = None if seq.signal_mask is None else tuple(seq.signal_mask[i] for i in idx)
    return seq.with_frames(seq.frames[idx], mask)
