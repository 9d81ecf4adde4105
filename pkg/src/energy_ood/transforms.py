"""Simple image transformations and peripheral-distribution batch assembly.

Images are float arrays shaped (C, H, W); plain (H, W) arrays are accepted
by the individual transforms too. ``value_range`` is the valid input range
(``(0, 1)`` by default) that outputs are clipped to; ``None`` disables
clipping for unbounded feature data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError
from .rng import substream

KINDS = ("cutout", "permutation", "rotation", "gaussian_noise", "gaussian_blur", "sobel")

DEFAULT_PARAMS = {
    "cutout": {"side_fraction": 0.5},
    "permutation": {"k": 2},
    "rotation": {"quarter_turns": None},
    "gaussian_noise": {"sigma": 0.3},
    "gaussian_blur": {"kernel_size": 5, "sigma": 1.5},
    "sobel": {},
}

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_MAX_RESPONSE = 4.0 * math.sqrt(2.0)

UNIT_RANGE = (0.0, 1.0)


def _clip(img, value_range):
    if value_range is None:
        return img
    return np.clip(img, value_range[0], value_range[1])


def _spatial(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ParameterError(f"expected an (H, W) or (C, H, W) image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------------------
# geometric
# ---------------------------------------------------------------------------


def rotate(img, quarter_turns: int):
    """Counterclockwise rotation by ``90 * quarter_turns`` degrees."""
    img = _spatial(img)
    if quarter_turns not in (1, 2, 3):
        raise ParameterError(f"quarter_turns must be 1, 2 or 3, got {quarter_turns}")
    if quarter_turns % 2 and img.shape[-1] != img.shape[-2]:
        raise ParameterError(f"odd quarter turns need a square image, got {img.shape[-2:]}")
    return np.rot90(img, quarter_turns, axes=(-2, -1)).copy()


def permute_patches(img, k: int, perm):
    """Split into a ``k x k`` grid and place source patch ``perm[j]`` at slot ``j``.

    Slots and patches are numbered row-major.
    """
    img = _spatial(img)
    h, w = img.shape[-2:]
    if k < 2:
        raise ParameterError(f"grid size k must be >= 2, got {k}")
    if h % k or w % k:
        raise ParameterError(f"image {h}x{w} is not divisible into a {k}x{k} grid")
    perm = np.asarray(perm, dtype=np.intp)
    if sorted(perm.tolist()) != list(range(k * k)):
        raise ParameterError(f"perm must be a permutation of range({k * k})")
    if np.array_equal(perm, np.arange(k * k)):
        raise ParameterError("identity permutation is not a transformation")
    ph, pw = h // k, w // k
    lead = img.shape[:-2]
    grid = img.reshape(*lead, k, ph, k, pw)
    grid = np.moveaxis(grid, -3, -2).reshape(*lead, k * k, ph, pw)
    out = grid[..., perm, :, :].reshape(*lead, k, k, ph, pw)
    return np.moveaxis(out, -2, -3).reshape(img.shape).copy()


def inverse_permutation(perm):
    return np.argsort(np.asarray(perm, dtype=np.intp))


def random_permutation(k: int, rng) -> np.ndarray:
    """Uniform non-identity permutation of ``k * k`` patch slots."""
    ident = np.arange(k * k)
    while True:
        perm = rng.permutation(k * k)
        if not np.array_equal(perm, ident):
            return perm


def cutout_side(side_fraction: float, h: int, w: int) -> int:
    return max(1, int(math.floor(side_fraction * min(h, w) + 0.5)))


def cutout(img, side_fraction: float, seed=None, rng=None, fill: float = 0.0):
    """Zero a square of side ``round(side_fraction * min(H, W))`` at a uniform location."""
    img = _spatial(img)
    if not 0 < side_fraction <= 1:
        raise ParameterError(f"side_fraction must lie in (0, 1], got {side_fraction}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    h, w = img.shape[-2:]
    side = cutout_side(side_fraction, h, w)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = img.copy()
    out[..., top:top + side, left:left + side] = fill
    return out


# ---------------------------------------------------------------------------
# appearance
# ---------------------------------------------------------------------------


def gaussian_noise(img, sigma: float, seed=None, rng=None, value_range=UNIT_RANGE):
    """Add ``sigma`` times seeded standard normal noise per pixel, then clip."""
    img = _spatial(img)
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    return _clip(img + sigma * rng.standard_normal(img.shape), value_range)


def correlate2d(plane, kernel):
    """Same-size 2-D cross-correlation with reflect padding (edge not repeated)."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(plane, ((0, 0),) * (plane.ndim - 2) + ((ph, ph), (pw, pw)), mode="reflect")
    win = sliding_window_view(padded, (kh, kw), axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, kernel)


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian kernel of odd side ``kernel_size``."""
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd and >= 3, got {kernel_size}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = np.arange(kernel_size) - kernel_size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k2 = np.outer(g, g)
    return k2 / k2.sum()


def gaussian_blur(img, kernel_size: int, sigma: float, value_range=UNIT_RANGE):
    img = _spatial(img)
    kernel = gaussian_kernel(kernel_size, sigma)
    h, w = img.shape[-2:]
    if kernel_size // 2 >= min(h, w):
        raise ParameterError(f"kernel {kernel_size} too large for reflect padding of a {h}x{w} image")
    return _clip(correlate2d(img, kernel), value_range)


def luminance(img) -> np.ndarray:
    img = _spatial(img)
    return img if img.ndim == 2 else img.mean(axis=0)


def sobel_gradients(gray):
    """Horizontal and vertical Sobel responses of a single-channel image."""
    gray = np.asarray(gray, dtype=np.float64)
    return correlate2d(gray, SOBEL_X), correlate2d(gray, SOBEL_Y)


def sobel_magnitude(img) -> np.ndarray:
    gx, gy = sobel_gradients(luminance(img))
    return np.sqrt(gx * gx + gy * gy)


def sobel(img, value_range=UNIT_RANGE):
    """Gradient magnitude rescaled by its maximum possible value, replicated per channel."""
    img = _spatial(img)
    lo, hi = value_range if value_range is not None else (0.0, 1.0)
    mag = sobel_magnitude(img) / SOBEL_MAX_RESPONSE
    out = _clip(lo + mag, value_range)
    if img.ndim == 3:
        out = np.repeat(out[None], img.shape[0], axis=0)
    return out


# ---------------------------------------------------------------------------
# declarative specs and PD batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    """One transformation kind with its parameters.

    Missing parameters take the package defaults. A rotation with
    ``quarter_turns=None`` draws 1, 2 or 3 turns per image.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ParameterError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        _validate(self.kind, merged)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "params": dict(self.params)}
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        unknown = set(d) - {"kind", "params", "seed"}
        if unknown:
            raise ParameterError(f"unknown transform keys {sorted(unknown)}")
        return cls(d["kind"], dict(d.get("params", {})), d.get("seed"))


def _validate(kind, p):
    if kind == "cutout" and not 0 < p["side_fraction"] <= 1:
        raise ParameterError("cutout side_fraction must lie in (0, 1]")
    if kind == "permutation" and (int(p["k"]) != p["k"] or p["k"] < 2):
        raise ParameterError("permutation k must be an integer >= 2")
    if kind == "rotation" and p["quarter_turns"] not in (None, 1, 2, 3):
        raise ParameterError("rotation quarter_turns must be 1, 2, 3 or null")
    if kind == "gaussian_noise" and not p["sigma"] > 0:
        raise ParameterError("noise sigma must be positive")
    if kind == "gaussian_blur":
        if p["kernel_size"] < 3 or p["kernel_size"] % 2 == 0:
            raise ParameterError("blur kernel_size must be odd and >= 3")
        if not p["sigma"] > 0:
            raise ParameterError("blur sigma must be positive")


def default_specs(kinds=KINDS) -> list:
    return [TransformSpec(k) for k in kinds]


def apply_spec(img, spec: TransformSpec, rng, value_range=UNIT_RANGE):
    """Apply ``spec`` to one image, drawing any randomness from ``rng``.

    Returns ``(image, detail)`` where ``detail`` records the realised random
    choices (turns, permutation) for provenance.
    """
    p = spec.params
    kind = spec.kind
    if kind == "rotation":
        turns = p["quarter_turns"] or int(rng.integers(1, 4))
        return rotate(img, turns), {"quarter_turns": turns}
    if kind == "permutation":
        perm = random_permutation(int(p["k"]), rng)
        return permute_patches(img, int(p["k"]), perm), {"perm": perm.tolist()}
    if kind == "cutout":
        return cutout(img, p["side_fraction"], rng=rng), {}
    if kind == "gaussian_noise":
        return gaussian_noise(img, p["sigma"], rng=rng, value_range=value_range), {}
    if kind == "gaussian_blur":
        return gaussian_blur(img, p["kernel_size"], p["sigma"], value_range=value_range), {}
    return sobel(img, value_range=value_range), {}


@dataclass
class PDBatch:
    """Peripheral-distribution images with per-image provenance.

    Output ``j`` was produced from source ``j % N`` (repetition ``j // N``)
    by ``specs[spec_index[j]]``.
    """

    images: np.ndarray
    source_index: np.ndarray
    spec_index: np.ndarray
    specs: list
    details: list

    def __len__(self):
        return len(self.images)

    def provenance(self, j: int) -> tuple:
        return int(self.source_index[j]), self.specs[int(self.spec_index[j])]


def choose_specs(n_out: int, n_specs: int, seed: int) -> np.ndarray:
    """Per-image uniform spec choice from the ``pd-choice`` substream."""
    return substream(seed, "pd-choice").integers(0, n_specs, size=n_out)


def build_pd_batch(batch, specs, ratio: int = 1, seed: int = 0, value_range=UNIT_RANGE) -> PDBatch:
    """Produce ``ratio * N`` PD images, each one spec applied to one source image.

    Randomness for image ``j`` comes from a generator keyed by ``(seed, j)``,
    so results do not depend on evaluation order.
    """
    batch = np.asarray(batch, dtype=np.float64)
    specs = list(specs)
    if not specs:
        raise ParameterError("at least one transform spec is required")
    if int(ratio) != ratio or ratio < 1:
        raise ParameterError(f"ratio must be a positive integer, got {ratio}")
    n = len(batch)
    n_out = int(ratio) * n
    choice = choose_specs(n_out, len(specs), seed)
    source = np.arange(n_out) % n if n else np.zeros(0, dtype=np.intp)
    out = np.empty((n_out,) + batch.shape[1:])
    details = [{} for _ in range(n_out)]
    for s, spec in enumerate(specs):
        rows = np.flatnonzero(choice == s)
        if rows.size == 0:
            continue
        if spec.kind in DETERMINISTIC_KINDS:
            out[rows] = _apply_stack(batch[source[rows]], spec, value_range)
            continue
        extra = () if spec.seed is None else (spec.seed,)
        for j in rows:
            rng = substream(seed, "pd-apply", int(j), *extra)
            out[j], details[j] = apply_spec(batch[source[j]], spec, rng, value_range)
    return PDBatch(out, source, choice, specs, details)


DETERMINISTIC_KINDS = ("gaussian_blur", "sobel")


def _apply_stack(stack, spec: TransformSpec, value_range):
    """Blur or Sobel over an (N, C, H, W) stack in one pass; equals per-image application."""
    if spec.kind == "gaussian_blur":
        k, sigma = spec.params["kernel_size"], spec.params["sigma"]
        if k // 2 >= min(stack.shape[-2:]):
            raise ParameterError(f"kernel {k} too large for reflect padding of a {stack.shape[-2:]} image")
        return _clip(correlate2d(stack, gaussian_kernel(k, sigma)), value_range)
    lo = value_range[0] if value_range is not None else 0.0
    gray = stack.mean(axis=1)
    gx, gy = correlate2d(gray, SOBEL_X), correlate2d(gray, SOBEL_Y)
    out = _clip(lo + np.sqrt(gx * gx + gy * gy) / SOBEL_MAX_RESPONSE, value_range)
    return np.repeat(out[:, None], stack.shape[1], axis=1)
