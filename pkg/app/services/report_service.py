"""
Report Rendering Service

Renders metrics and explanation reports to HTML with Jinja2 templates and
converts them to PDF with WeasyPrint; also holds the tabular exports of the
alignment study.
"""

import base64
import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from jinja2 import Environment, FileSystemLoader

from app.core.config import settings
from app.core.exceptions import MISAppError
from app.schemas.reports import MetricsReport, PDFResponse
from app.services.interpret import AlignmentReport, ExplainReport

logger = logging.getLogger(__name__)

# (label, inclusive low, exclusive high); the top bucket also includes 1.0
TAU_BUCKETS = (
    ("[0.9, 1.0]", 0.9, float("inf")),
    ("[0.8, 0.9)", 0.8, 0.9),
    ("[0.5, 0.8)", 0.5, 0.8),
    ("< 0.5", float("-inf"), 0.5),
)

ALIGNMENT_COLUMNS = ["sequence", "target", "sim_1", "sim_2", "sim_3", "W_hop_1", "W_hop_2", "W_hop_3"]


def tau_distribution(taus: Sequence[float]) -> List[Dict[str, Any]]:
    """Counts and percentages of Kendall taus per bucket."""
    total = len(taus)
    rows = []
    for label, low, high in TAU_BUCKETS:
        count = sum(1 for t in taus if low <= t < high)
        rows.append({"bucket": label, "count": count, "percent": 100.0 * count / total if total else 0.0})
    return rows


def alignment_rows(report: AlignmentReport, app_name=str) -> List[Dict[str, str]]:
    """One row per sample; hops missing from a 1-hop model are left blank."""
    rows = []
    for sample in report.samples:
        row = {
            "sequence": " ".join(app_name(a) for a in sample.window if a != 0),
            "target": app_name(sample.target),
        }
        for hop in range(3):
            row[f"sim_{hop + 1}"] = f"{sample.sims[hop]:.4f}" if hop < len(sample.sims) else ""
            row[f"W_hop_{hop + 1}"] = f"{sample.hop_weights[hop]:.4f}" if hop < len(sample.hop_weights) else ""
        rows.append(row)
    return rows


def write_alignment_csv(report: AlignmentReport, path: Path, app_name=str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=ALIGNMENT_COLUMNS)
        writer.writeheader()
        writer.writerows(alignment_rows(report, app_name))
    return path


class ReportService:
    """
    Service class for rendering run reports.

    Templates are looked up in ``Settings.TEMPLATES_DIR``; WeasyPrint is
    imported on first PDF request so HTML rendering works without its native
    libraries.
    """

    def __init__(self, templates_dir: Optional[Path] = None):
        self.templates_dir = Path(templates_dir or settings.TEMPLATES_DIR)
        self.jinja_env = Environment(loader=FileSystemLoader(str(self.templates_dir)), autoescape=True)

    def _render_template(self, template_name: str, context: Dict[str, Any]) -> str:
        try:
            template = self.jinja_env.get_template(template_name)
            return template.render(**context)
        except Exception as e:
            raise MISAppError(f"Template rendering failed: {str(e)}") from e

    def render_metrics_html(self, report: MetricsReport) -> str:
        columns = sorted(
            {c for metrics in report.results.values() for c in metrics}, key=lambda c: (c[:3], int(c[4:]))
        )
        return self._render_template(
            "metrics_report.html",
            {"title": settings.PROJECT_NAME, "report": report, "columns": columns},
        )

    def render_explain_html(self, explain: ExplainReport, app_name=str) -> str:
        taus = [s.tau for s in explain.alignment.samples]
        return self._render_template(
            "explain_report.html",
            {
                "title": settings.PROJECT_NAME,
                "explain": explain,
                "rows": alignment_rows(explain.alignment, app_name),
                "columns": ALIGNMENT_COLUMNS,
                "buckets": tau_distribution(taus),
                "app_name": app_name,
            },
        )

    def html_to_pdf(self, html_content: str) -> bytes:
        """
        Generate PDF bytes from HTML content using WeasyPrint.

        Raises:
            MISAppError: If WeasyPrint is unavailable or rendering fails
        """
        try:
            from weasyprint import HTML
            from weasyprint.text.fonts import FontConfiguration
        except (ImportError, OSError) as e:
            raise MISAppError(f"PDF rendering unavailable: {e}") from e
        try:
            return HTML(string=html_content).write_pdf(font_config=FontConfiguration())
        except Exception as e:
            raise MISAppError(f"PDF generation failed: {str(e)}") from e

    def pdf_response(self, pdf_bytes: bytes, filename: str, message: str) -> PDFResponse:
        return PDFResponse(
            success=True,
            message=message,
            pdf_data=base64.b64encode(pdf_bytes).decode("utf-8"),
            filename=filename,
            size_bytes=len(pdf_bytes),
        )

    def metrics_pdf(self, report: MetricsReport) -> PDFResponse:
        pdf_bytes = self.html_to_pdf(self.render_metrics_html(report))
        logger.info("metrics report rendered (%d bytes)", len(pdf_bytes))
        return self.pdf_response(pdf_bytes, f"metrics_{report.split}.pdf", "Metrics report generated successfully")


# Global service instance
report_service = ReportService()
