"""
API Response Utilities

This module provides the standardized response envelopes shared by the
exception handlers and the service endpoints.
"""

from typing import Any, Dict, Optional

from fastapi import status
from fastapi.responses import JSONResponse


def success_response(
    data: Any = None,
    message: str = "Success",
    status_code: int = status.HTTP_200_OK,
    meta: Optional[Dict[str, Any]] = None,
) -> JSONResponse:
    """
    Create a standardized success response.

    Args:
        data (Any): The response data
        message (str): Success message
        status_code (int): HTTP status code
        meta (Optional[Dict[str, Any]]): Additional metadata

    Returns:
        JSONResponse: Standardized success response
    """
    response_content = {"success": True, "message": message, "data": data}
    if meta:
        response_content["meta"] = meta
    return JSONResponse(status_code=status_code, content=response_content)


def error_response(
    message: str = "An error occurred",
    status_code: int = status.HTTP_400_BAD_REQUEST,
    path: Optional[str] = None,
    errors: Optional[Dict[str, Any]] = None,
) -> JSONResponse:
    """
    Create the error envelope ``{error, message, status_code, path}``.

    Args:
        message (str): Error message
        status_code (int): HTTP status code
        path (Optional[str]): Request URL that failed
        errors (Optional[Dict[str, Any]]): Detailed error information

    Returns:
        JSONResponse: Standardized error response
    """
    response_content: Dict[str, Any] = {
        "error": True,
        "message": message,
        "status_code": status_code,
        "path": path,
    }
    if errors:
        response_content["errors"] = errors
    return JSONResponse(status_code=status_code, content=response_content)
