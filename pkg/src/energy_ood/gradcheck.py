"""Central finite-difference gradients, independent of the tape."""

from __future__ import annotations

import numpy as np

from .tensor import GradTape, Tensor


def numeric_gradient(fn, arrays, step: float = 1e-6) -> list:
    """``d fn / d arrays[k]`` by central differences; ``fn`` maps arrays to a float."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(*arrays)
            flat[i] = orig - step
            down = fn(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def tape_gradient(build, arrays) -> tuple:
    """``(value, grads)`` of ``build(*tensors)`` through the tape."""
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = build(*params)
    return out.item(), tape.backward(out, params)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)`` over all entries jointly.

    Norm-wise rather than entrywise: entries that are zero up to rounding
    would otherwise make the ratio meaningless.
    """
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def check_gradient(build, arrays, step: float = 1e-6) -> float:
    """Relative error between tape and finite-difference gradients of ``build``."""
    _, analytic = tape_gradient(build, arrays)
    numeric = numeric_gradient(lambda *xs: build(*(Tensor(x) for x in xs)).item(), arrays, step)
    return relative_error(analytic, numeric)


def directional_error(build, arrays, rng, directions: int = 3, step: float = 1e-6) -> float:
    """Worst relative error of ``<grad, v>`` against a central difference along random unit ``v``.

    Two evaluations per direction instead of two per coordinate, for
    builders with too many inputs for :func:`check_gradient`.
    """
    _, analytic = tape_gradient(build, arrays)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(a.shape) for a in arrays]
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        up = build(*(Tensor(a + step * v) for a, v in zip(arrays, vs))).item()
        down = build(*(Tensor(a - step * v) for a, v in zip(arrays, vs))).item()
        numeric = (up - down) / (2.0 * step)
        exact = sum(float(np.sum(g * v)) for g, v in zip(analytic, vs))
        worst = max(worst, abs(exact - numeric) / max(abs(exact) + abs(numeric), 1e-8))
    return worst
