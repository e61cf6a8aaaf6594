"""
Report Schemas

Pydantic models for the metrics report written by ``eval`` and the base64
PDF envelope returned by the report endpoint.
"""

from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field


class MetricsReport(BaseModel):
    """
    Ranking metrics of the model and the baselines on one split.

    Attributes:
        split: ``standard`` or ``cold_start``
        seed: Root seed of the run
        instances: Evaluated test instances
        dropped_unseen: Cold-start test instances removed for unseen apps
        results: Predictor name -> {"ACC@1": .., "MRR@5": ..}
        network: ModelConfig of the evaluated checkpoint
        efficiency: Parameter count and latency profile (``--profile`` only)
    """

    split: str = Field(..., description="Evaluated split mode")
    seed: int = Field(default=0, description="Root seed")
    instances: int = Field(default=0, ge=0, description="Test instance count")
    dropped_unseen: int = Field(default=0, ge=0, description="Cold-start instances dropped")
    results: Dict[str, Dict[str, float]] = Field(default_factory=dict, description="Metrics per predictor")
    network: Dict[str, Any] = Field(default_factory=dict, description="Model hyperparameters")
    efficiency: Optional[Dict[str, Any]] = Field(None, description="Efficiency profile")

    def table(self) -> str:
        """Fixed-width text table, one row per predictor."""
        columns = sorted({c for metrics in self.results.values() for c in metrics}, key=lambda c: (c[:3], int(c[4:])))
        header = f"{'predictor':<10}" + "".join(f"{c:>9}" for c in columns)
        rows = [header]
        for name, metrics in self.results.items():
            rows.append(f"{name:<10}" + "".join(f"{metrics.get(c, 0.0):>9.4f}" for c in columns))
        return "\n".join(rows) + "\n"


class PDFResponse(BaseModel):
    """
    PDF generation response schema.

    Attributes:
        success: Whether PDF generation was successful
        message: Response message
        pdf_data: Base64 encoded PDF data
        filename: Suggested filename for the PDF
        content_type: MIME type of the response
        size_bytes: Size of the generated PDF in bytes
    """

    success: bool = Field(..., description="Success status")
    message: str = Field(..., description="Response message")
    pdf_data: Optional[str] = Field(None, description="Base64 encoded PDF data")
    filename: Optional[str] = Field(None, description="Suggested filename")
    content_type: str = Field(default="application/pdf", description="MIME type")
    size_bytes: Optional[int] = Field(None, description="PDF size in bytes")

    model_config = ConfigDict(from_attributes=True)
