"""
Adam optimizer and the central finite-difference gradient oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from app.core.exceptions import NumericError, ShapeError
from app.services.autodiff import Tape, Tensor

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
Objective = Callable[[Tape, Dict[str, Tensor]], Tensor]


@dataclass
class AdamState:
    """
    Optimizer moments per named parameter.

    Attributes:
        step: Number of updates applied so far
        m: First-moment estimates, same shapes as the parameters
        v: Second-moment estimates, same shapes as the parameters
    """

    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def initialize(
        cls, params: Params, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8
    ) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: Params, grads: Params, state: AdamState, lr: float) -> Tuple[Params, AdamState]:
    """
    Apply one bias-corrected Adam update.

    The inputs are not mutated; new parameter and moment arrays are returned
    so published snapshots stay immutable.

    Args:
        params: Current parameter values by name
        grads: Gradients by name (same names and shapes)
        state: Moments from the previous step
        lr: Learning rate

    Returns:
        Tuple of (updated params, updated state)
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("adam_step", sorted(params), sorted(grads), detail="parameter names differ")

    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape or state.m[name].shape != value.shape:
            raise ShapeError("adam_step", value.shape, grad.shape, detail=name)
        m = b1 * state.m[name] + (1.0 - b1) * grad
        v = b2 * state.v[name] + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v

    return new_params, AdamState(step, new_m, new_v, b1, b2, eps)


def gradients(objective: Objective, params: Params) -> Tuple[float, Params]:
    """Evaluate ``objective`` on a fresh tape and return (value, leaf gradients)."""
    tape = Tape()
    root = objective(tape, tape.leaves(params))
    return float(root.value), tape.backward(root)


def _evaluate(objective: Objective, params: Params) -> float:
    tape = Tape()
    return float(objective(tape, tape.leaves(params)).value)


def finite_diff_check(
    objective: Objective,
    params: Params,
    h: float = 1e-5,
    names: Optional[Iterable[str]] = None,
    skip: Optional[Dict[str, Callable[[Tuple[int, ...]], bool]]] = None,
) -> Dict[str, float]:
    """
    Compare tape gradients with central differences coordinate by coordinate.

    Args:
        objective: Builds a scalar on the given tape from the leaf tensors;
            must be deterministic
        params: Point at which gradients are checked
        h: Finite-difference step
        names: Parameter groups to check (default: all)
        skip: Optional per-group predicate over coordinates to leave out
            (frozen rows)

    Returns:
        Mapping group name -> max relative error, using the denominator
        ``max(|analytic|, |numeric|, 1e-8)``
    """
    if h <= 0:
        raise NumericError("finite-difference step must be positive")
    first = _evaluate(objective, params)
    if _evaluate(objective, params) != first:
        raise NumericError("objective is not deterministic under repeated evaluation")

    _, analytic = gradients(objective, params)
    skip = skip or {}
    errors: Dict[str, float] = {}
    for name in names if names is not None else params:
        work = params[name].copy()
        shifted = {**params, name: work}
        excluded = skip.get(name)
        worst = 0.0
        for index in np.ndindex(work.shape):
            if excluded is not None and excluded(index):
                continue
            original = work[index]
            work[index] = original + h
            plus = _evaluate(objective, shifted)
            work[index] = original - h
            minus = _evaluate(objective, shifted)
            work[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic[name][index]
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
        errors[name] = worst
        logger.debug("gradient check %s: max relative error %.3e", name, worst)
    return errors
