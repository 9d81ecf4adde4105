"""Randomised checks of the energy-barrier implication for linear classifiers.

For ``f(v) = W v`` with every row of ``W`` and every vector inside the ball of
radius ``B``, the barrier premise

    E(x+) - E(x) > B * ||x' - x+|| + gamma

implies ``E(x') - E(x) > gamma`` because ``E(x') - E(x+) >= -B * ||x+ - x'||``.
:func:`run_barrier_lab` draws many such configurations, a share of them with
``x'`` close to ``x+`` so that the premise is frequently satisfied.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .energy import barrier_trials
from .errors import ParameterError
from .rng import substream


@dataclass(frozen=True)
class BarrierProbe:
    dim: int = 8
    classes: int = 4
    bound: float = 2.0
    alpha_prob: float = 0.05
    gamma_max: float = 1.0
    near_fraction: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or self.classes < 1:
            raise ParameterError("dim and classes must be positive")
        if not self.bound > 0:
            raise ParameterError("bound must be positive")
        if not 0 < self.alpha_prob < 1:
            raise ParameterError("alpha_prob must lie in (0, 1)")
        if self.gamma_max < 0 or not 0 <= self.near_fraction <= 1:
            raise ParameterError("gamma_max must be >= 0 and near_fraction in [0, 1]")


def _in_ball(rng, shape, radius):
    """Uniform samples inside the ball of the given radius (last axis = dimension)."""
    v = rng.standard_normal(shape)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = rng.random(shape[:-1] + (1,)) ** (1.0 / shape[-1])
    return v / norm * radius * u


def _project(v, radius):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(norm > radius, v * (radius / np.maximum(norm, 1e-300)), v)


def draw_trials(n: int, probe: BarrierProbe, seed: int) -> dict:
    """Random classifiers, ID points, augmented points, OOD points and gammas."""
    rng = substream(seed, "barrier")
    b, d = probe.bound, probe.dim
    weight = _in_ball(rng, (n, probe.classes, d), b)
    x = _in_ball(rng, (n, d), b)
    x_plus = _in_ball(rng, (n, d), b) * rng.random((n, 1))
    far = _in_ball(rng, (n, d), b)
    near = _project(x_plus + _in_ball(rng, (n, d), 0.1 * b), b)
    use_near = rng.random(n) < probe.near_fraction
    x_prime = np.where(use_near[:, None], near, far)
    gamma = rng.random(n) * probe.gamma_max
    return {"weight": weight, "x": x, "x_plus": x_plus, "x_prime": x_prime, "gamma": gamma}


@dataclass
class BarrierSummary:
    trials: int
    premise_rate: float
    conclusion_rate: float
    violations: int
    chain_min_slack: float
    chain_violations: int
    gamma_estimate: float
    alpha_prob: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def run_barrier_lab(trials: int = 100_000, seed: int = 7, probe: BarrierProbe = BarrierProbe(),
                    slack_tol: float = 1e-9) -> BarrierSummary:
    """Count premise-true / conclusion-false outcomes over ``trials`` random draws.

    ``gamma_estimate`` is the largest gamma for which the premise margin
    ``E(x+) - E(x) - B * ||x' - x+||`` is exceeded in a ``1 - alpha_prob``
    share of the draws (floored at 0).
    """
    if trials < 1:
        raise ParameterError("trials must be positive")
    t = draw_trials(trials, probe, seed)
    r = barrier_trials(t["weight"], t["x"], t["x_plus"], t["x_prime"], probe.bound, t["gamma"],
                       probe.temperature)
    violations = int(np.count_nonzero(r["premise_holds"] & ~r["conclusion_holds"]))
    margin = r["barrier"] - probe.bound * r["distance"]
    gamma_hat = max(0.0, float(np.quantile(margin, probe.alpha_prob)))
    return BarrierSummary(
        trials=trials,
        premise_rate=float(r["premise_holds"].mean()),
        conclusion_rate=float(r["conclusion_holds"].mean()),
        violations=violations,
        chain_min_slack=float(r["chain_slack"].min()),
        chain_violations=int(np.count_nonzero(r["chain_slack"] < -slack_tol)),
        gamma_estimate=gamma_hat,
        alpha_prob=probe.alpha_prob,
        seed=seed,
    )
