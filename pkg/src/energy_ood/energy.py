"""Free energy, the derived OOD score, thresholded detection and log-Z tracking.

Convention: ``score = -E`` and a verdict of 1 means "in-distribution"
(``score > threshold``); a score equal to the threshold is rejected as OOD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import CalibrationError, ContractError, DomainError, NumericError, ParameterError
from .tensor import Tensor

VERDICT_CONVENTION = (
    "score = -free_energy; verdict 1 = in-distribution (score > threshold), "
    "verdict 0 = out-of-distribution (score <= threshold). The detection "
    "pseudo-code in some write-ups labels 1 as OOD; this package does not."
)


@dataclass(frozen=True)
class EnergyConfig:
    temperature: float = 1.0

    def __post_init__(self):
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ParameterError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class Detector:
    threshold: float
    config: EnergyConfig = EnergyConfig()
    convention: str = VERDICT_CONVENTION

    def __post_init__(self):
        if math.isnan(self.threshold) or self.threshold == math.inf:
            raise ParameterError(f"invalid threshold {self.threshold}")


@dataclass
class PartitionTrace:
    """Per-epoch empirical ``log Z`` estimates on a fixed reference set."""

    entries: list = field(default_factory=list)

    def append(self, value: float):
        if not math.isfinite(value):
            raise NumericError(f"non-finite log-partition estimate {value}")
        self.entries.append(float(value))

    def max_step_change(self) -> float:
        if len(self.entries) < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self.entries))))


def _as_logits(logits) -> Tensor:
    if isinstance(logits, Tensor):
        t = logits
    else:
        arr = np.asarray(logits, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("logits must be finite")
        t = Tensor(arr)
    if t.ndim == 1:
        t = tn.reshape(t, (1, -1))
    if t.ndim != 2 or t.shape[1] < 1:
        raise DomainError(f"logits must have shape (N, C) with C >= 1, got {t.shape}")
    return t


def free_energy(logits, cfg: EnergyConfig = EnergyConfig()) -> Tensor:
    """``E_i = -T * logsumexp(logits_i / T)``, differentiable in the logits."""
    t = _as_logits(logits)
    temp = cfg.temperature
    if temp == 1.0:
        return tn.neg(tn.logsumexp(t, axis=1))
    return tn.scale(tn.logsumexp(tn.scale(t, 1.0 / temp), axis=1), -temp)


def ood_score(logits, cfg: EnergyConfig = EnergyConfig()) -> Tensor:
    """Negative free energy; larger means more in-distribution."""
    return tn.neg(free_energy(logits, cfg))


def free_energy_np(logits, cfg: EnergyConfig = EnergyConfig()) -> np.ndarray:
    return free_energy(logits, cfg).numpy()


def detect(logits, detector: Detector) -> np.ndarray:
    """Verdicts per sample: 1 (in-distribution) iff score > threshold."""
    scores = ood_score(logits, detector.config).data
    return verdicts_from_scores(scores, detector.threshold)


def verdicts_from_scores(scores, threshold: float) -> np.ndarray:
    return (np.asarray(scores, dtype=np.float64) > threshold).astype(np.int8)


def required_count(n: int, tpr_target: float) -> int:
    """Smallest k with k / n >= tpr_target, robust to float rounding of the product."""
    k = math.ceil(n * tpr_target - 1e-9 * max(1.0, n))
    return min(max(k, 1), n)


def calibrate_threshold(id_scores, tpr_target: float = 0.95, min_count: int = 20) -> float:
    """Largest threshold that still accepts a ``tpr_target`` share of ``id_scores``.

    Acceptance is strict (``score > threshold``), so the result is the float
    just below the k-th largest ID score, where k = ceil(tpr_target * n).
    """
    scores = np.asarray(id_scores, dtype=np.float64).ravel()
    if not 0 < tpr_target < 1:
        raise CalibrationError(f"tpr_target must lie in (0, 1), got {tpr_target}")
    if scores.size < min_count:
        raise CalibrationError(f"need at least {min_count} ID scores, got {scores.size}")
    if not np.all(np.isfinite(scores)):
        raise CalibrationError("ID scores must be finite")
    k = required_count(scores.size, tpr_target)
    kth_largest = np.sort(scores)[scores.size - k]
    return float(np.nextafter(kth_largest, -np.inf))


def estimate_log_partition(logit_rows, cfg: EnergyConfig = EnergyConfig()) -> float:
    """``log Z_hat = logsumexp over samples and classes of logits/T - log n``.

    ``logit_rows`` is an (n, C) array of reference-set logits; use
    :func:`estimate_model_log_partition` to evaluate a model directly.
    """
    arr = np.asarray(logit_rows.data if isinstance(logit_rows, Tensor) else logit_rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ParameterError("reference set must be a non-empty (n, C) logit array")
    z = arr / cfg.temperature
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()) - math.log(arr.shape[0]))


def estimate_model_log_partition(model, reference_images, cfg: EnergyConfig = EnergyConfig()) -> float:
    from .classifier import predict_logits

    if len(reference_images) == 0:
        raise ParameterError("reference set is empty")
    return estimate_log_partition(predict_logits(model, reference_images), cfg)


# ---------------------------------------------------------------------------
# energy-barrier implication for a linear classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BarrierTrial:
    premise_holds: bool
    conclusion_holds: bool
    barrier: float          # E(x+) - E(x)
    ood_gap: float          # E(x') - E(x)
    chain_slack: float      # E(x') - E(x+) + B * ||x+ - x'||, >= 0 in theory
    distance: float         # ||x' - x+||


def _linear_energy(weight: np.ndarray, v: np.ndarray, temperature: float) -> np.ndarray:
    if weight.ndim == 3:
        z = np.einsum("ncd,nd->nc", weight, v) / temperature
    else:
        z = v @ weight.T / temperature
    m = z.max(axis=-1, keepdims=True)
    return -temperature * (m[..., 0] + np.log(np.exp(z - m).sum(axis=-1)))


def barrier_trials(weight, x, x_plus, x_prime, bound: float, gamma, temperature: float = 1.0,
                   check_domain: bool = True) -> dict:
    """Vectorised premise/conclusion evaluation for linear ``f(v) = W v``.

    ``weight`` is (C, D), or (n, C, D) for one classifier per trial. ``x``,
    ``x_plus``, ``x_prime`` are (n, D) arrays (or single vectors); ``gamma``
    is a scalar or length-n array. Returns a dict of arrays with the fields of
    :class:`BarrierTrial`.
    """
    w = np.asarray(weight, dtype=np.float64)
    x, x_plus, x_prime = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (x, x_plus, x_prime))
    if bound <= 0:
        raise ContractError("representation bound must be positive")
    tol = 1e-12 * bound
    if np.any(np.linalg.norm(w, axis=-1) > bound + tol):
        raise ContractError("a class representation norm exceeds the bound")
    if check_domain:
        for name, v in (("x", x), ("x_plus", x_plus), ("x_prime", x_prime)):
            if np.any(np.linalg.norm(v, axis=1) > bound + tol):
                raise ContractError(f"{name} lies outside the bounded domain of radius {bound}")
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (x.shape[0],))
    if np.any(gamma < 0):
        raise ContractError("gamma must be non-negative")
    e_x = _linear_energy(w, x, temperature)
    e_plus = _linear_energy(w, x_plus, temperature)
    e_prime = _linear_energy(w, x_prime, temperature)
    dist = np.linalg.norm(x_prime - x_plus, axis=1)
    barrier = e_plus - e_x
    gap = e_prime - e_x
    return {
        "premise_holds": barrier > bound * dist + gamma,
        "conclusion_holds": gap > gamma,
        "barrier": barrier,
        "ood_gap": gap,
        "chain_slack": (e_prime - e_plus) + bound * dist,
        "distance": dist,
    }


def barrier_trial(weight, x, x_plus, x_prime, bound: float, gamma: float,
                  temperature: float = 1.0) -> BarrierTrial:
    """Evaluate the barrier premise and the ID/OOD gap conclusion for one draw."""
    r = barrier_trials(weight, x, x_plus, x_prime, bound, gamma, temperature)
    return BarrierTrial(**{k: v[0].item() for k, v in r.items()})
