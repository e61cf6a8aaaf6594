"""
Report API Endpoints

Renders a metrics report (as written by ``misapp eval``) to a base64 PDF.
"""

from fastapi import APIRouter, HTTPException, status

from app.core.exceptions import MISAppError
from app.schemas.reports import MetricsReport, PDFResponse
from app.services.report_service import report_service

router = APIRouter(prefix="/reports", tags=["Reports"])


@router.post(
    "/metrics",
    response_model=PDFResponse,
    status_code=status.HTTP_200_OK,
    summary="Generate Metrics Report PDF",
    description="Render the ranking-metrics report of one split as a PDF document.",
)
async def generate_metrics_pdf(report: MetricsReport) -> PDFResponse:
    """
    Generate a metrics report PDF.

    Args:
        report: Metrics JSON produced by the eval command

    Returns:
        PDFResponse: Contains success status, message, and base64-encoded PDF data

    Raises:
        HTTPException: If PDF generation fails
    """
    try:
        return report_service.metrics_pdf(report)
    except MISAppError as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Failed to generate metrics PDF: {str(e)}",
        )
