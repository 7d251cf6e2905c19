"""FastAPI application exposing the saliency pipeline.

Error mapping: bad inputs (:class:`DataError`) become 400 responses and
missing or broken model resources (:class:`ModelError`) become 503, both
with the message in ``detail``. The module-level ``app`` reads its
checkpoint and feature-cache locations from the ``DEEPFEAT_MODEL`` and
``DEEPFEAT_CACHE`` environment variables; embedders call
:func:`create_app` directly.
"""

from __future__ import annotations

import os

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from deepfeat import __version__
from deepfeat.errors import DataError, ModelError
from deepfeat.service import handlers, schemas
from deepfeat.service.handlers import ServiceState


def create_app(
    model_path: str | None = None,
    cache_dir: str | None = None,
    working_long_side: int = 448,
) -> FastAPI:
    state = ServiceState(model_path, cache_dir, working_long_side)
    app = FastAPI(title="deepfeat", version=__version__)
    app.state.deepfeat = state

    @app.exception_handler(DataError)
    async def _data_error(request: Request, exc: DataError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ModelError)
    async def _model_error(request: Request, exc: ModelError) -> JSONResponse:
        return JSONResponse(status_code=503, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return handlers.handle_health(state)

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest) -> schemas.PredictResponse:
        return handlers.handle_predict(state, req)

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(req: schemas.EvaluateRequest) -> schemas.EvaluateResponse:
        return handlers.handle_evaluate(state, req)

    @app.post("/compare", response_model=schemas.EvaluateResponse)
    def compare(req: schemas.CompareRequest) -> schemas.EvaluateResponse:
        return handlers.handle_compare(state, req)

    @app.post("/features", response_model=schemas.FeaturesResponse)
    def features(req: schemas.FeaturesRequest) -> schemas.FeaturesResponse:
        return handlers.handle_features(state, req)

    @app.post("/cache", response_model=schemas.CacheResponse)
    def cache(req: schemas.CacheRequest) -> schemas.CacheResponse:
        return handlers.handle_cache(state, req)

    return app


app = create_app(
    model_path=os.environ.get("DEEPFEAT_MODEL"),
    cache_dir=os.environ.get("DEEPFEAT_CACHE"),
)
