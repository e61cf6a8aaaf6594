"""
Checkpoint archives: one float64 array per named parameter plus a format tag
and the ModelConfig JSON, stored as an uncompressed NumPy ``.npz``.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import ConfigurationError
from app.schemas.config import ModelConfig
from app.services.model import MISAppModel, Params

logger = logging.getLogger(__name__)

FORMAT_TAG = "misapp-checkpoint/1"
_FORMAT_KEY = "__format__"
_CONFIG_KEY = "__config__"


def save_checkpoint(params: Params, config: ModelConfig, path: Path) -> Path:
    """Write ``params`` and ``config`` to ``path`` (suffix ``.npz`` enforced)."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.asarray(value, dtype=np.float64) for name, value in params.items()}
    arrays[_FORMAT_KEY] = np.array(FORMAT_TAG)
    arrays[_CONFIG_KEY] = np.array(config.model_dump_json())
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    logger.info("checkpoint written to %s (%d parameter groups)", path, len(params))
    return path


def load_checkpoint(path: Path) -> Tuple[Params, ModelConfig]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError("checkpoint", f"{path} does not exist")
    with np.load(path, allow_pickle=False) as archive:
        if _FORMAT_KEY not in archive.files or str(archive[_FORMAT_KEY]) != FORMAT_TAG:
            raise ConfigurationError("checkpoint", f"{path} is not a {FORMAT_TAG} archive")
        try:
            config = ModelConfig.model_validate_json(str(archive[_CONFIG_KEY]))
        except ValidationError as exc:
            raise ConfigurationError("checkpoint", f"embedded model config is invalid: {exc}") from exc
        params = {
            name: np.array(archive[name], dtype=np.float64)
            for name in archive.files
            if name not in (_FORMAT_KEY, _CONFIG_KEY)
        }
    return params, config


def load_model(path: Path) -> MISAppModel:
    params, config = load_checkpoint(path)
    return MISAppModel(config, params)
