from fastapi import APIRouter, HTTPException

from core.errors import ContractViolation, NumericError
from core.model_manager import ModelNotLoaded, model_manager
from core.pooling import SELECTION_THRESHOLD
from models.api_models import FramePush, PredictRequest, PredictResponse, ScanStepResponse, TraceRequest
from models.record_models import TraceRecord

router = APIRouter()


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, ModelNotLoaded):
        return HTTPException(status_code=503, detail=str(e))
    if isinstance(e, ContractViolation):
        return HTTPException(status_code=400, detail=str(e))
    return HTTPException(status_code=500, detail=f"numeric failure: {e}")


@router.post("/predict", response_model=PredictResponse, tags=["Inference"])
async def predict(request: PredictRequest):
    """Class prediction for one feature sequence"""
    try:
        result = model_manager.predict(request.frames, request.id)
    except (ModelNotLoaded, ContractViolation, NumericError) as e:
        raise _http_error(e)
    return PredictResponse(
        id=request.id,
        pred=result.pred,
        probs=result.probs.tolist(),
        gammas=None if result.gammas is None else result.gammas.tolist(),
    )


@router.post("/trace", response_model=TraceRecord, response_model_exclude_none=True, tags=["Inference"])
async def trace(request: TraceRequest):
    """Per-frame importance scores of one feature sequence"""
    try:
        return model_manager.trace(request.frames, request.id, request.label, request.signal_mask)
    except (ModelNotLoaded, ContractViolation, NumericError) as e:
        raise _http_error(e)


@router.post("/stream/{session}/push", response_model=ScanStepResponse, tags=["Streaming"])
async def push_frame(session: str, request: FramePush):
    """Feed the next frame of a streaming session"""
    try:
        step = model_manager.push(session, request.frame)
    except (ModelNotLoaded, ContractViolation, NumericError) as e:
        raise _http_error(e)
    return ScanStepResponse(
        session=session,
        t=step.t,
        gamma=step.gamma,
        selected=step.gamma > SELECTION_THRESHOLD,
        pred=int(step.probs.argmax()),
        probs=step.probs.tolist(),
    )


@router.post("/stream/{session}/reset", tags=["Streaming"])
async def reset_session(session: str):
    """Drop the pooled state of a streaming session"""
    existed = model_manager.reset(session)
    return {"session": session, "reset": existed}
