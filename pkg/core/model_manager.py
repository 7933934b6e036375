import logging
import os
import threading
from collections import OrderedDict
from typing import List, Optional

import numpy as np

from core.errors import AdaScanError, ContractViolation
from core.model import ModelParams, load_model, scanner
from core.pooling import FeatureSequence, OnlineScanner, ScanStep, selected_mask
from core.train import SampleScore, score
from models.record_models import TraceRecord

logger = logging.getLogger(__name__)

MODEL_PATH_ENV = "ADASCAN_MODEL_PATH"
MAX_SESSIONS = 256


class ModelNotLoaded(AdaScanError):
    """No model has been loaded into the manager."""


def finite_frames(frames) -> np.ndarray:
    """Request frames as floats; NaN or Inf is the caller's error, not a numeric failure."""
    try:
        arr = np.asarray(frames, dtype=np.float64)
    except ValueError as e:
        raise ContractViolation(f"frames must form a T x D matrix: {e}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("frames must hold finite numbers")
    return arr


def trace_record(result: SampleScore) -> TraceRecord:
    """Importance trace of one scored adascan sample."""
    if result.gammas is None:
        raise ContractViolation("only the adascan pooler produces importance scores")
    gammas = result.gammas.tolist()
    seq = result.seq
    return TraceRecord(id=seq.id, label=seq.label, pred=result.pred, gammas=gammas,
                       selected=selected_mask(gammas),
                       signal_mask=list(seq.signal_mask) if seq.signal_mask is not None else None)


class ModelManager:
    """Holds one trained model plus the open streaming sessions.

    At most ``max_sessions`` sessions are kept; opening one more drops the
    least recently pushed.
    """

    def __init__(self, model_path: Optional[str] = None, max_sessions: int = MAX_SESSIONS):
        self.params: Optional[ModelParams] = None
        self.model_path: Optional[str] = None
        self.max_sessions = max_sessions
        self._sessions: "OrderedDict[str, OnlineScanner]" = OrderedDict()
        self._lock = threading.Lock()
        path = model_path or os.environ.get(MODEL_PATH_ENV)
        if path:
            try:
                self.load(path)
            except (OSError, AdaScanError, ValueError) as e:
                logger.warning("could not load model from %s: %s", path, e)

    @property
    def loaded(self) -> bool:
        return self.params is not None

    def load(self, path: str) -> ModelParams:
        params = load_model(path)
        with self._lock:
            self.params = params
            self.model_path = str(path)
            self._sessions.clear()
        logger.info("serving %s model from %s", params.pooler, path)
        return params

    def use(self, params: ModelParams, path: Optional[str] = None):
        with self._lock:
            self.params = params
            self.model_path = path
            self._sessions.clear()

    def require(self) -> ModelParams:
        if self.params is None:
            raise ModelNotLoaded("no model loaded")
        return self.params

    def _sequence(self, frames: List[List[float]], seq_id: str, label: Optional[int],
                  signal_mask: Optional[List[bool]]) -> FeatureSequence:
        params = self.require()
        if label is not None and label >= params.dims.C:
            raise ContractViolation(f"label {label} >= C={params.dims.C}")
        return FeatureSequence(finite_frames(frames), label or 0, seq_id, signal_mask)

    def predict(self, frames: List[List[float]], seq_id: str = "") -> SampleScore:
        return score(self._sequence(frames, seq_id, None, None), self.require())

    def trace(self, frames: List[List[float]], seq_id: str = "", label: Optional[int] = None,
              signal_mask: Optional[List[bool]] = None) -> TraceRecord:
        seq = self._sequence(frames, seq_id, label, signal_mask)
        record = trace_record(score(seq, self.require()))
        if label is None:
            record.label = None
        return record

    def push(self, session: str, frame: List[float]) -> ScanStep:
        params = self.require()
        if len(frame) != params.dims.D:
            raise ContractViolation(f"frame has dimension {len(frame)}, model expects {params.dims.D}")
        arr = finite_frames(frame)
        with self._lock:
            scan = self._sessions.get(session)
            if scan is None:
                if len(self._sessions) >= self.max_sessions:
                    dropped, _ = self._sessions.popitem(last=False)
                    logger.info("dropping idle streaming session %s", dropped)
                scan = self._sessions[session] = scanner(params)
            else:
                self._sessions.move_to_end(session)
            return scan.push(arr)

    @property
    def sessions(self) -> List[str]:
        with self._lock:
            return list(self._sessions)

    def reset(self, session: str) -> bool:
        with self._lock:
            return self._sessions.pop(session, None) is not None


model_manager = ModelManager()
