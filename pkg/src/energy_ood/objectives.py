"""Tuning losses: cross-entropy, energy-bounded hinge and energy-barrier logistic."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as tn
from .classifier import check_labels
from .errors import DimensionError, NumericError, ParameterError
from .tensor import Tensor

MODES = ("OEST", "OEST*")


@dataclass(frozen=True)
class TuningConfig:
    """Loss weights and margins for one tuning run.

    ``loss_weight_alpha`` scales the energy term in the composite objective;
    ``beta`` is the temperature of the barrier logistic; ``m_in``/``m_per``
    are the hinge margins of the bounded loss.
    """

    mode: str = "OEST*"
    loss_weight_alpha: float = 0.2
    beta: float = 10.0
    m_in: float = -25.0
    m_per: float = -7.0
    pd_ratio: int = 1
    batch_size: int = 128

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.loss_weight_alpha >= 0:
            raise ParameterError("loss_weight_alpha must be non-negative")
        if not self.beta > 0:
            raise ParameterError("beta must be positive")
        if self.m_in > self.m_per:
            raise ParameterError(f"m_in ({self.m_in}) must not exceed m_per ({self.m_per})")
        if int(self.pd_ratio) != self.pd_ratio or self.pd_ratio < 1:
            raise ParameterError("pd_ratio must be a positive integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ParameterError("batch_size must be a positive integer")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TuningConfig":
        if mode == "OEST":
            base = dict(mode="OEST", loss_weight_alpha=0.01, m_in=-25.0, m_per=-7.0)
        elif mode == "OEST*":
            base = dict(mode="OEST*", loss_weight_alpha=0.2, beta=10.0)
        else:
            raise ParameterError(f"unknown tuning mode {mode!r}")
        base.update(overrides)
        return cls(**base)


def _vector(t, name) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.ndim != 1:
        raise DimensionError(f"{name} must be a 1-D energy vector, got shape {t.shape}")
    if t.shape[0] == 0:
        raise ParameterError(f"{name} is empty")
    return t


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``logsumexp(logits_i) - logits_i[y_i]`` over the batch."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise DimensionError(f"cross_entropy expects (N, C) logits with N >= 1, got {logits.shape}")
    y = check_labels(labels, logits.shape[1])
    if y.shape[0] != logits.shape[0]:
        raise DimensionError(f"{logits.shape[0]} logit rows but {y.shape[0]} labels")
    return tn.mean(tn.sub(tn.logsumexp(logits, axis=1), tn.pick(logits, y)))


def energy_bounded_loss(e_in, e_per, cfg: TuningConfig) -> Tensor:
    """Squared hinges pushing ID energy below ``m_in`` and PD energy above ``m_per``.

    The two hinge terms are averaged independently over their own samples.
    """
    if cfg.mode != "OEST":
        raise ParameterError("energy_bounded_loss belongs to mode 'OEST'")
    e_in, e_per = _vector(e_in, "E_in"), _vector(e_per, "E_per")
    in_term = tn.mean(tn.square(tn.relu(tn.shift(e_in, -cfg.m_in))))
    per_term = tn.mean(tn.square(tn.relu(tn.shift(tn.neg(e_per), cfg.m_per))))
    return tn.add(in_term, per_term)


def energy_barrier_loss(e_in, e_per, cfg: TuningConfig) -> Tensor:
    """Mean of ``-log sigmoid((E_per - E_in) / beta)`` over paired samples.

    ``e_in[i]`` pairs with ``e_per[i]``. Only the gap enters, so a common
    shift of both energies leaves the loss unchanged.
    """
    if cfg.mode != "OEST*":
        raise ParameterError("energy_barrier_loss belongs to mode 'OEST*'")
    e_in, e_per = _vector(e_in, "E_in"), _vector(e_per, "E_per")
    if e_in.shape != e_per.shape:
        raise ParameterError(f"E_in has {e_in.shape[0]} entries but E_per has {e_per.shape[0]}")
    gap = tn.scale(tn.sub(e_per, e_in), 1.0 / cfg.beta)
    # -log sigmoid(z) = softplus(-z)
    return tn.mean(tn.softplus(tn.neg(gap)))


def energy_loss(e_in, e_per, cfg: TuningConfig) -> Tensor:
    if cfg.mode == "OEST":
        return energy_bounded_loss(e_in, e_per, cfg)
    return energy_barrier_loss(e_in, e_per, cfg)


def composite_objective(ce: Tensor, energy: Tensor, cfg: TuningConfig) -> Tensor:
    """``ce + loss_weight_alpha * energy``."""
    for name, t in (("cross-entropy", ce), ("energy loss", energy)):
        value = t.item() if isinstance(t, Tensor) else float(t)
        if not math.isfinite(value):
            raise NumericError(f"{name} term is not finite")
    ce = ce if isinstance(ce, Tensor) else Tensor(ce)
    energy = energy if isinstance(energy, Tensor) else Tensor(energy)
    return tn.add(ce, tn.scale(energy, cfg.loss_weight_alpha))
