from fastapi import APIRouter, HTTPException

from core.errors import AdaScanError
from core.model_manager import ModelNotLoaded, model_manager
from models.api_models import LoadRequest, ModelInfo

API_VERSION = "1.0.0"

router = APIRouter()


def _info() -> ModelInfo:
    params = model_manager.require()
    return ModelInfo(path=model_manager.model_path, pooler=params.pooler, dims=params.dims,
                     hyper=params.hyper.to_document())


@router.get("/", tags=["System Info"])
async def root():
    return {"message": "AdaScan temporal pooling API", "version": API_VERSION}


@router.get("/model", response_model=ModelInfo, tags=["System Info"])
async def get_model():
    """Dimensions and hyperparameters of the served model"""
    try:
        return _info()
    except ModelNotLoaded as e:
        raise HTTPException(status_code=503, detail=str(e))


@router.post("/model/load", response_model=ModelInfo, tags=["System Info"])
async def load_model(request: LoadRequest):
    """Load a model JSON file from the server's filesystem"""
    try:
        model_manager.load(request.path)
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail=f"model file {request.path} not found")
    except (AdaScanError, ValueError) as e:
        raise HTTPException(status_code=400, detail=f"invalid model file: {e}")
    return _info()
