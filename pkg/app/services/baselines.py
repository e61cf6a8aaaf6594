"""
Frequency (MFU) and recency (MRU) baselines.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, Mapping, Sequence

import numpy as np

from app.schemas.events import PAD, PredictionInstance
from app.services.ingest import TrainSession
from app.services.metrics import rank_from_scores

logger = logging.getLogger(__name__)

UsageCounts = Dict[str, Dict[int, int]]


def usage_counts(sessions: Iterable[TrainSession]) -> UsageCounts:
    """Per-user launch counts over the training-visible session prefixes."""
    counts: Dict[str, Counter] = {}
    for session in sessions:
        counts.setdefault(session.user_id, Counter()).update(a for a in session.apps if a != PAD)
    return {user: dict(sorted(c.items())) for user, c in counts.items()}


def write_usage(path: Path, usage: UsageCounts) -> None:
    payload = {user: {str(a): n for a, n in apps.items()} for user, apps in usage.items()}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def read_usage(path: Path) -> UsageCounts:
    payload = json.loads(Path(path).read_text())
    return {user: {int(a): int(n) for a, n in apps.items()} for user, apps in payload.items()}


def _count_vector(counts: Mapping[int, int], num_apps: int) -> np.ndarray:
    vector = np.zeros(num_apps)
    for app, n in counts.items():
        if 1 <= app <= num_apps:
            vector[app - 1] += n
    return vector


def baseline_mfu(usage: UsageCounts, instances: Sequence[PredictionInstance], num_apps: int) -> np.ndarray:
    """
    Rank apps by the user's training usage count (ties: lower index first).
    Users without training history fall back to global counts.
    """
    global_counts = np.zeros(num_apps)
    per_user: Dict[str, np.ndarray] = {}
    for user, counts in usage.items():
        per_user[user] = _count_vector(counts, num_apps)
        global_counts += per_user[user]
    fallback = sum(1 for inst in instances if inst.user_id not in per_user)
    if fallback:
        logger.info("MFU: %d instances use global frequencies", fallback)
    scores = np.stack([per_user.get(inst.user_id, global_counts) for inst in instances]) if instances else np.zeros((0, num_apps))
    return rank_from_scores(scores, [inst.target for inst in instances])


def baseline_mru(instances: Sequence[PredictionInstance], num_apps: int) -> np.ndarray:
    """
    Rank apps by the recency of their last occurrence in the window; apps
    absent from the window follow by index.
    """
    scores = np.zeros((len(instances), num_apps))
    for row, inst in enumerate(instances):
        for position, app in enumerate(inst.window, start=1):
            if app != PAD and app <= num_apps:
                scores[row, app - 1] = position
    return rank_from_scores(scores, [inst.target for inst in instances])
