from fastapi import FastAPI

from api.inference_routes import router as inference_router
from api.system_routes import API_VERSION, router as system_router

app = FastAPI(
    title="AdaScan Temporal Pooling API",
    version=API_VERSION,
    description="Serves a trained adaptive scan pooling model: predictions, importance traces and streaming scans",
    tags_metadata=[
        {
            "name": "System Info",
            "description": "Service status and the loaded model",
        },
        {
            "name": "Inference",
            "description": "Classification and importance traces of whole sequences",
        },
        {
            "name": "Streaming",
            "description": "Online scan, one frame at a time",
        },
    ]
)

# Include routers
app.include_router(system_router)
app.include_router(inference_router)
