"""
Training Service

Mini-batch Adam training of the MISApp network with seeded shuffling,
best-validation model selection on MRR@5 and optional early stopping; model
evaluation helpers and the efficiency self-measurement.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from app.core.exceptions import DataError, TrainingDivergedError
from app.schemas.config import ModelConfig, TrainConfig
from app.schemas.events import PredictionInstance
from app.services.autodiff import Tape, Tensor
from app.services.metrics import RankingResult, rank_from_scores, summarize
from app.services.model import FROZEN_ROWS, MISAppModel, Params, count_parameters, forward_batch, init_params, loss
from app.services.optim import AdamState, Objective, adam_step, finite_diff_check
from app.services.session_graphs import GraphBatch, encode_batch

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc1: Optional[float] = None
    val_mrr5: Optional[float] = None

    def line(self) -> str:
        val = "n/a" if self.val_acc1 is None else f"{self.val_acc1:.4f}"
        mrr = "n/a" if self.val_mrr5 is None else f"{self.val_mrr5:.4f}"
        return f"epoch {self.epoch:3d}  loss {self.loss:.6f}  val ACC@1 {val}  val MRR@5 {mrr}"


@dataclass
class FitResult:
    """
    Attributes:
        params: Selected parameters (best validation MRR@5, else the last epoch)
        final_params: Parameters after the last completed epoch
        history: One record per completed epoch
        best_epoch: Epoch the selected parameters come from
    """

    config: ModelConfig
    params: Params
    final_params: Params
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def model(self) -> MISAppModel:
        return MISAppModel(self.config, self.params)

    def history_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.history)


def zero_frozen_rows(grads: Params) -> Params:
    for name, row in FROZEN_ROWS.items():
        if name in grads:
            grads[name][row] = 0.0
    return grads


def batch_objective(
    batch: GraphBatch,
    config: ModelConfig,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Objective:
    """Mean cross-entropy of ``batch`` as a tape objective over named parameters."""

    def objective(tape: Tape, params: Dict[str, Tensor]) -> Tensor:
        logits, _ = forward_batch(batch, params, config, train=train, rng=rng)
        return loss(logits, batch.targets)

    return objective


def evaluate_model(
    model: MISAppModel,
    instances: Sequence[PredictionInstance],
    acc_ks: Sequence[int] = (1, 3, 5),
    mrr_ks: Sequence[int] = (3, 5),
    truncate: bool = True,
) -> RankingResult:
    """Rank the true app of every instance under ``model`` and summarize."""
    if not instances:
        return RankingResult(n=0)
    ranks = rank_instances(model, instances)
    return summarize(ranks, acc_ks, mrr_ks, truncate)


def rank_instances(model: MISAppModel, instances: Sequence[PredictionInstance]) -> np.ndarray:
    probs = model.predict_proba(instances)
    return rank_from_scores(probs, [inst.target for inst in instances])


def fit(
    train: Sequence[PredictionInstance],
    val: Sequence[PredictionInstance],
    model_config: ModelConfig,
    train_config: TrainConfig,
    init_rng: np.random.Generator,
    shuffle_rng: np.random.Generator,
    dropout_rng: Optional[np.random.Generator] = None,
    params: Optional[Params] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> FitResult:
    """
    Train with Adam on shuffled mini-batches.

    Args:
        train: Training instances (nonempty)
        val: Validation instances; empty disables model selection
        model_config: Network hyperparameters (``num_apps`` set)
        train_config: Optimizer and schedule
        init_rng: Parameter initialization stream
        shuffle_rng: Per-epoch permutation stream
        dropout_rng: Dropout mask stream
        params: Warm-start parameters instead of a fresh initialization
        on_epoch: Callback receiving every epoch record

    Raises:
        DataError: If ``train`` is empty
        TrainingDivergedError: If the loss becomes non-finite; carries the
            last parameters that produced a finite epoch and the best
            selected so far
    """
    if not train:
        raise DataError("training split is empty")
    current = params if params is not None else init_params(model_config, init_rng)
    state = AdamState.initialize(current, train_config.beta1, train_config.beta2, train_config.epsilon)
    dropout_rng = dropout_rng if dropout_rng is not None else np.random.default_rng(0)

    full = encode_batch(train, model_config.window, model_config.intent_window, model_config.hops)
    size = len(full)
    logger.info(
        "training %d parameters on %d instances (%d validation)", count_parameters(current), size, len(val)
    )

    best = current
    best_mrr = -np.inf
    best_epoch = 0
    stale = 0
    history: List[EpochRecord] = []

    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(size)
        start_params = current
        total = 0.0
        for start in range(0, size, train_config.batch_size):
            rows = order[start : start + train_config.batch_size]
            batch = full.subset(rows)
            tape = Tape()
            leaves = tape.leaves(current)
            root = batch_objective(batch, model_config, train=True, rng=dropout_rng)(tape, leaves)
            value = float(root.value)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, start_params, best=best if best_epoch else None)
            grads = zero_frozen_rows(tape.backward(root))
            current, state = adam_step(current, grads, state, train_config.lr)
            total += value * len(rows)

        record = EpochRecord(epoch=epoch, loss=total / size)
        if val:
            result = evaluate_model(MISAppModel(model_config, current), val, acc_ks=(1,), mrr_ks=(5,))
            record.val_acc1, record.val_mrr5 = result.acc[1], result.mrr[5]
            if record.val_mrr5 > best_mrr:
                best, best_mrr, best_epoch, stale = current, record.val_mrr5, epoch, 0
            else:
                stale += 1
        else:
            best, best_epoch = current, epoch
        history.append(record)
        logger.info(record.line())
        if on_epoch is not None:
            on_epoch(record)
        if train_config.patience is not None and stale >= train_config.patience:
            logger.info("early stop after %d epochs without val MRR@5 improvement", stale)
            break

    return FitResult(config=model_config, params=best, final_params=current, history=history, best_epoch=best_epoch)


class EfficiencyProfile(BaseModel):
    """Parameter footprint and single-instance inference latency."""

    parameters: int
    size_mb: float
    mean_latency_s: float
    p95_latency_s: float
    samples: int


def profile_model(model: MISAppModel, instances: Sequence[PredictionInstance], limit: int = 200) -> EfficiencyProfile:
    count = count_parameters(model.params)
    timings = []
    for inst in list(instances)[:limit]:
        started = time.perf_counter()
        model.forward(inst)
        timings.append(time.perf_counter() - started)
    timings_arr = np.asarray(timings) if timings else np.zeros(1)
    return EfficiencyProfile(
        parameters=count,
        size_mb=count * 8 / (1024 * 1024),
        mean_latency_s=float(timings_arr.mean()),
        p95_latency_s=float(np.percentile(timings_arr, 95)),
        samples=len(timings),
    )


def random_instances(config: ModelConfig, rng: np.random.Generator, count: int) -> List[PredictionInstance]:
    """Random valid instances (no consecutive repeats) for gradient checks and smoke runs."""
    instances = []
    for _ in range(count):
        length = int(rng.integers(1, config.window + 1))
        apps: List[int] = []
        while len(apps) < length:
            app = int(rng.integers(1, config.num_apps + 1))
            if not apps or apps[-1] != app:
                apps.append(app)
        category = int(rng.integers(1, config.num_categories + 1)) if config.spatial_enabled else None
        instances.append(
            PredictionInstance(
                user_id="check",
                window=[0] * (config.window - length) + apps,
                window_len=length,
                target=int(rng.integers(1, config.num_apps + 1)),
                tau=int(rng.integers(0, 24)),
                rho_category=category,
            )
        )
    return instances


def gradient_check(config: ModelConfig, rng: np.random.Generator, count: int = 4, h: float = 1e-5) -> Dict[str, float]:
    """
    Finite-difference check of the full forward + loss for every parameter
    group, dropout disabled and frozen rows skipped.

    Returns:
        Parameter group -> max relative error
    """
    config = config.model_copy(update={"dropout": 0.0})
    params = init_params(config, rng)
    batch = encode_batch(random_instances(config, rng, count), config.window, config.intent_window, config.hops)
    skip = {name: (lambda index, row=row: index[0] == row) for name, row in FROZEN_ROWS.items() if name in params}
    return finite_diff_check(batch_objective(batch, config), params, h=h, skip=skip)
