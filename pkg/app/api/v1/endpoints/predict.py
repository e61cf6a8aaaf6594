"""
Prediction API Endpoints

Next-app prediction, forward-trace explanation and model information for the
checkpoint configured through ``MISAPP_CHECKPOINT_PATH``.
"""

import logging
from typing import NoReturn

from fastapi import APIRouter, Depends, HTTPException, status

from app.core.exceptions import ConfigurationError, DataError
from app.schemas.api import ExplainResponse, ModelInfoResponse, PredictRequest, PredictResponse
from app.services.predictor import PredictionService, get_predictor

logger = logging.getLogger(__name__)

router = APIRouter(tags=["Prediction"])


def _raise_http(exc: Exception) -> NoReturn:
    if isinstance(exc, ConfigurationError):
        raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail=str(exc))
    if isinstance(exc, DataError):
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(exc))
    logger.exception("prediction failed")
    raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=f"Prediction failed: {exc}")


@router.post(
    "/predict",
    response_model=PredictResponse,
    summary="Predict the next app",
    description="Rank apps by predicted probability of being launched next.",
)
async def predict_next_app(
    request: PredictRequest, predictor: PredictionService = Depends(get_predictor)
) -> PredictResponse:
    """
    Predict the next app for a usage context.

    Unknown app identifiers are rejected with 422; a missing checkpoint
    yields 503.
    """
    try:
        predictions = predictor.predict(request)
    except Exception as exc:
        _raise_http(exc)
    return PredictResponse(success=True, message="Prediction generated successfully", predictions=predictions)


@router.post("/explain", response_model=ExplainResponse, summary="Explain a prediction")
async def explain_prediction(
    request: PredictRequest, predictor: PredictionService = Depends(get_predictor)
) -> ExplainResponse:
    try:
        trace = predictor.explain(request)
    except Exception as exc:
        _raise_http(exc)
    return ExplainResponse(success=True, message="Trace exported successfully", **trace)


@router.get("/model/info", response_model=ModelInfoResponse, summary="Served model information")
async def model_info(predictor: PredictionService = Depends(get_predictor)) -> ModelInfoResponse:
    try:
        info = predictor.info()
    except Exception as exc:
        _raise_http(exc)
    return ModelInfoResponse(success=True, **info)
