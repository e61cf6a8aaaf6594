"""
Application Configuration Module

This module contains process-level settings for the MISApp toolkit (CLI and
HTTP service). It uses pydantic-settings for environment variable management;
run-level configuration (model, training, generator) lives in
``app.schemas.config``.
"""

import logging
from pathlib import Path
from typing import List, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Application settings configuration class.

    Every field can be overridden through a ``MISAPP_``-prefixed environment
    variable or a ``.env`` file in the working directory.
    """

    # Application settings
    PROJECT_NAME: str = "MISApp Next-App Prediction"
    VERSION: str = "0.1.0"
    LOG_LEVEL: str = "INFO"

    # Artifact locations
    OUTPUT_DIR: Path = Path("runs")
    CHECKPOINT_PATH: Optional[Path] = None
    VOCAB_PATH: Optional[Path] = None
    TEMPLATES_DIR: Path = Path(__file__).parent.parent / "templates"

    # CORS settings
    ALLOWED_HOSTS: List[str] = ["*"]

    # API settings
    API_V1_STR: str = "/api/v1"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="MISAPP_",
        case_sensitive=True,
        extra="ignore",
    )


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configure root logging once for an entry point.

    Args:
        level: Level name; falls back to ``Settings.LOG_LEVEL``.
    """
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# Create settings instance
settings = Settings()
