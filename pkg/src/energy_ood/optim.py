"""SGD with momentum and the cosine-annealed learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class Schedule:
    """Cosine annealing from ``eta_start`` to ``eta_end`` over ``total_epochs``."""

    eta_start: float
    eta_end: float
    total_epochs: int

    def __post_init__(self):
        if not (self.eta_start > 0 and self.eta_end > 0):
            raise ParameterError("learning rates must be positive")
        if self.eta_end > self.eta_start:
            raise ParameterError("eta_end must not exceed eta_start")
        if int(self.total_epochs) != self.total_epochs or self.total_epochs < 0:
            raise ParameterError("total_epochs must be a non-negative integer")

    @classmethod
    def for_mode(cls, mode: str, total_epochs: int = 10) -> "Schedule":
        if mode == "OEST":
            return cls(1e-4, 1e-8, total_epochs)
        if mode == "OEST*":
            return cls(1e-3, 1e-7, total_epochs)
        raise ParameterError(f"unknown tuning mode {mode!r}")


def lr_at(schedule: Schedule, t: float) -> float:
    """Learning rate at epoch ``t`` in ``[0, total_epochs]``."""
    total = schedule.total_epochs
    if total < 1:
        raise ParameterError("lr_at needs a schedule with at least one epoch")
    if not 0 <= t <= total:
        raise ParameterError(f"epoch {t} outside [0, {total}]")
    span = schedule.eta_start - schedule.eta_end
    return schedule.eta_end + 0.5 * span * (1.0 + math.cos(math.pi * t / total))


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=5e-4, state=None):
    """One SGD update with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``. ``params`` and ``grads`` are sequences of
    arrays; ``state`` is the list of velocities from the previous call (or
    ``None`` for zeros). Returns ``(new_params, new_state)`` as fresh arrays.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if state is None:
        state = [np.zeros_like(p) for p in params]
    elif len(state) != len(params):
        raise DimensionError(f"{len(params)} parameters but {len(state)} momentum buffers")
    new_params, new_state = [], []
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != np.shape(v):
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {np.shape(v)}")
        v = momentum * v + g + weight_decay * p if weight_decay else momentum * v + g
        new_state.append(v)
        new_params.append(p - lr * v)
    return new_params, new_state
