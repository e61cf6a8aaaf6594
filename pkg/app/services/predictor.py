"""
Prediction Service

Serves a trained checkpoint: maps raw app identifiers through the
vocabulary, builds the left-padded window and runs the inference forward.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from app.core.config import settings
from app.core.exceptions import ConfigurationError
from app.schemas.api import AppScore, PredictRequest
from app.schemas.events import PAD, PredictionInstance
from app.services.checkpoint import load_model
from app.services.ingest import AppVocabulary
from app.services.model import ForwardTrace, MISAppModel, count_parameters

logger = logging.getLogger(__name__)


class PredictionService:
    """
    Lazily loads the checkpoint and vocabulary named by the settings.

    Attributes:
        checkpoint_path: ``.npz`` checkpoint to serve
        vocab_path: ``vocab.json``; defaults to the checkpoint's sibling
    """

    def __init__(self, checkpoint_path: Optional[Path] = None, vocab_path: Optional[Path] = None):
        self.checkpoint_path = checkpoint_path
        self.vocab_path = vocab_path
        self._model: Optional[MISAppModel] = None
        self._vocab: Optional[AppVocabulary] = None

    def _load(self) -> None:
        if self._model is not None:
            return
        if self.checkpoint_path is None or not Path(self.checkpoint_path).exists():
            raise ConfigurationError("MISAPP_CHECKPOINT_PATH", "no checkpoint is configured for serving")
        vocab_path = Path(self.vocab_path or Path(self.checkpoint_path).parent / "vocab.json")
        if not vocab_path.exists():
            raise ConfigurationError("MISAPP_VOCAB_PATH", f"{vocab_path} does not exist")
        self._model = load_model(Path(self.checkpoint_path))
        self._vocab = AppVocabulary.load(vocab_path)
        if self._vocab.size != self._model.config.num_apps:
            raise ConfigurationError("MISAPP_VOCAB_PATH", "vocabulary size does not match the checkpoint")
        logger.info("serving %s (%d apps)", self.checkpoint_path, self._vocab.size)

    @property
    def model(self) -> MISAppModel:
        self._load()
        return self._model

    @property
    def vocabulary(self) -> AppVocabulary:
        self._load()
        return self._vocab

    def instance(self, request: PredictRequest) -> PredictionInstance:
        """Window of the last T known apps (consecutive repeats collapsed), left-padded."""
        window_size = self.model.config.window
        apps: List[int] = []
        for app_id in request.window:
            index = self.vocabulary.index(app_id)
            if not apps or apps[-1] != index:
                apps.append(index)
        apps = apps[-window_size:]
        category = self.vocabulary.station_categories.get(request.station) if request.station else None
        return PredictionInstance(
            user_id="request",
            window=[PAD] * (window_size - len(apps)) + apps,
            window_len=len(apps),
            target=1,
            tau=request.hour,
            rho_category=category,
        )

    def trace(self, request: PredictRequest) -> ForwardTrace:
        return self.model.forward(self.instance(request))

    def predict(self, request: PredictRequest) -> List[AppScore]:
        trace = self.trace(request)
        return [AppScore(app=self.vocabulary.app_id(a), probability=p) for a, p in trace.top_k(request.top_k)]

    def explain(self, request: PredictRequest) -> Dict[str, Any]:
        trace = self.trace(request)
        name = self.vocabulary.app_id
        return {
            "hop_weights": [float(w) for w in trace.hop_weights],
            "pool_attention": [
                {name(app): float(a) for app, a in zip(trace.nodes, weights)} for weights in trace.pool_attention
            ],
            "top": [AppScore(app=name(a), probability=p) for a, p in trace.top_k(10)],
            "edges": {
                str(hop): [[name(u), name(v)] for u, v in sorted(trace.graphs.edges(hop))]
                for hop in range(1, len(trace.hop_weights) + 1)
            },
        }

    def info(self) -> Dict[str, Any]:
        count = count_parameters(self.model.params)
        return {
            "checkpoint": str(self.checkpoint_path),
            "apps": self.vocabulary.size,
            "parameters": count,
            "size_mb": count * 8 / (1024 * 1024),
            "config": self.model.config.model_dump(),
        }


# Global service instance
predictor_service = PredictionService(settings.CHECKPOINT_PATH, settings.VOCAB_PATH)


def get_predictor() -> PredictionService:
    return predictor_service
