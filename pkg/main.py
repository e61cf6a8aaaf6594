"""
FastAPI Application Entry Point

This module serves the trained next-app model over HTTP. It configures
global middleware, CORS settings, error envelopes and the API routers.
"""

import logging
import time

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware

from app.api.v1.endpoints import predict, reports
from app.core.config import configure_logging, settings
from app.core.exceptions import MISAppError
from app.utils.responses import error_response, success_response

configure_logging()
logger = logging.getLogger(__name__)


def create_application() -> FastAPI:
    """
    Create and configure the FastAPI application instance.

    Returns:
        FastAPI: Configured FastAPI application instance
    """
    app = FastAPI(
        title=settings.PROJECT_NAME,
        description="Next-app prediction with multi-hop session graphs",
        version=settings.VERSION,
        docs_url="/docs",
        redoc_url="/redoc",
    )

    app.add_middleware(
        CORSMiddleware,
        allow_origins=settings.ALLOWED_HOSTS,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.middleware("http")
    async def add_process_time_header(request: Request, call_next):
        """Add processing time header to all responses."""
        start_time = time.time()
        response = await call_next(request)
        response.headers["X-Process-Time"] = str(time.time() - start_time)
        return response

    @app.exception_handler(HTTPException)
    async def http_exception_handler(request: Request, exc: HTTPException):
        """
        Global HTTP exception handler.

        Args:
            request (Request): The request that caused the exception
            exc (HTTPException): The HTTP exception that was raised

        Returns:
            JSONResponse: Standardized error response
        """
        return error_response(message=exc.detail, status_code=exc.status_code, path=str(request.url))

    @app.exception_handler(MISAppError)
    async def toolkit_exception_handler(request: Request, exc: MISAppError):
        logger.error("unhandled toolkit error on %s: %s", request.url.path, exc)
        return error_response(message=str(exc), status_code=500, path=str(request.url))

    app.include_router(predict.router, prefix=settings.API_V1_STR)
    app.include_router(reports.router, prefix=settings.API_V1_STR)

    @app.get("/health")
    async def health_check():
        """
        Health check endpoint for monitoring and load balancers.

        Returns:
            JSONResponse: Health status information
        """
        return success_response(
            data={"status": "healthy", "service": settings.PROJECT_NAME, "version": settings.VERSION},
            message="Service is healthy",
        )

    return app


# Create the FastAPI application instance
app = create_application()

if __name__ == "__main__":
    import uvicorn

    uvicorn.run("main:app", host="0.0.0.0", port=8000, reload=True, log_level=settings.LOG_LEVEL.lower())
