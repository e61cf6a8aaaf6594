"""
Ranking metrics: per-instance ranks of the true app, ACC@k and MRR@k.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.core.exceptions import DataError, ShapeError


class RankingResult(BaseModel):
    """
    Ranks and the derived metrics for one evaluated predictor.

    Attributes:
        ranks: 1-based rank of the true app per instance
        acc: k -> ACC@k
        mrr: k -> MRR@k
        n: Instance count
    """

    ranks: List[int] = Field(default_factory=list, exclude=True)
    acc: Dict[int, float] = Field(default_factory=dict)
    mrr: Dict[int, float] = Field(default_factory=dict)
    n: int = 0

    def flat(self) -> Dict[str, float]:
        """``{"ACC@1": .., "MRR@5": ..}`` for tables and JSON reports."""
        out = {f"ACC@{k}": v for k, v in sorted(self.acc.items())}
        out.update({f"MRR@{k}": v for k, v in sorted(self.mrr.items())})
        return out


def rank_from_scores(scores: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """
    rank = 1 + #(apps with a strictly higher score)
             + #(apps with an equal score and a lower index).

    Args:
        scores: [N, |A|]; column i scores app index i + 1
        targets: 1-based target app indices
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != targets.shape[0]:
        raise ShapeError("rank_instances", scores.shape, targets.shape)
    if targets.size and (targets.min() < 1 or targets.max() > scores.shape[1]):
        raise DataError("target index outside the scored apps")
    rows = np.arange(scores.shape[0])
    columns = targets - 1
    target_scores = scores[rows, columns][:, None]
    higher = np.sum(scores > target_scores, axis=1)
    earlier_ties = np.sum((scores == target_scores) & (np.arange(scores.shape[1])[None, :] < columns[:, None]), axis=1)
    return (1 + higher + earlier_ties).astype(np.int64)


def acc_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DataError("ACC@k of an empty rank list")
    return float(np.mean(ranks <= k))


def mrr_at_k(ranks: Sequence[int], k: int, truncate: bool = True) -> float:
    """
    Mean reciprocal rank; with ``truncate`` ranks beyond k contribute 0,
    otherwise every rank contributes 1/rank.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DataError("MRR@k of an empty rank list")
    reciprocal = 1.0 / ranks
    if truncate:
        reciprocal = np.where(ranks <= k, reciprocal, 0.0)
    return float(np.mean(reciprocal))


def summarize(
    ranks: Iterable[int],
    acc_ks: Sequence[int] = (1, 3, 5),
    mrr_ks: Sequence[int] = (3, 5),
    truncate: bool = True,
) -> RankingResult:
    ranks = [int(r) for r in ranks]
    if not ranks:
        return RankingResult(n=0)
    return RankingResult(
        ranks=ranks,
        acc={k: acc_at_k(ranks, k) for k in acc_ks},
        mrr={k: mrr_at_k(ranks, k, truncate) for k in mrr_ks},
        n=len(ranks),
    )
