"""
Prediction API Schemas

Request and response models for the prediction, explanation and model
information endpoints.
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class PredictRequest(BaseModel):
    """
    Recent usage context for one prediction.

    Attributes:
        window: App identifiers, oldest first; only the last T are used
        hour: Hour of day of the most recent launch
        station: Base station of the most recent launch, when known
        top_k: Number of ranked apps to return
    """

    window: List[str] = Field(..., min_length=1, description="Recent app identifiers, oldest first")
    hour: int = Field(..., ge=0, le=23, description="Hour of day (0-23)")
    station: Optional[str] = Field(None, description="Base station identifier")
    top_k: int = Field(default=5, ge=1, le=100, description="Number of apps to return")


class AppScore(BaseModel):
    app: str = Field(..., description="App identifier")
    probability: float = Field(..., ge=0.0, le=1.0, description="Predicted probability")


class PredictResponse(BaseModel):
    success: bool = Field(..., description="Success status")
    message: str = Field(..., description="Response message")
    predictions: List[AppScore] = Field(default_factory=list, description="Ranked apps")


class ExplainResponse(BaseModel):
    """
    Forward-trace export for one context.

    Attributes:
        hop_weights: Hop-level attention weights
        pool_attention: Per hop, app -> pooling weight
        top: Ten most probable apps
        edges: ``"1"``/``"2"``/``"3"`` -> directed edge list of that hop
    """

    success: bool = Field(..., description="Success status")
    message: str = Field(..., description="Response message")
    hop_weights: List[float] = Field(default_factory=list)
    pool_attention: List[Dict[str, float]] = Field(default_factory=list)
    top: List[AppScore] = Field(default_factory=list)
    edges: Dict[str, List[List[str]]] = Field(default_factory=dict)


class ModelInfoResponse(BaseModel):
    success: bool = Field(..., description="Success status")
    checkpoint: str = Field(..., description="Served checkpoint path")
    apps: int = Field(..., description="App vocabulary size")
    parameters: int = Field(..., description="Trainable scalar count")
    size_mb: float = Field(..., description="Parameter size in MB (float64)")
    config: Dict[str, Any] = Field(default_factory=dict, description="Model hyperparameters")
