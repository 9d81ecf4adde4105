"""Dataset containers and loaders (IDX, CIFAR binary, synthetic Gaussians)."""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .rng import substream

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    """Images shaped (N, C, H, W) with optional integer labels.

    ``value_range`` is the valid pixel range, ``(0, 1)`` for image data and
    ``None`` for unbounded feature data such as synthetic Gaussians.
    """

    id: str
    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"
    provenance: dict = field(default_factory=dict)
    num_classes: int | None = None
    value_range: tuple | None = (0.0, 1.0)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise DataError(f"{self.id}: images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise DataError(f"{self.id}: dataset is empty")
        if self.split not in ("train", "val", "test"):
            raise DataError(f"{self.id}: unknown split {self.split!r}")
        if self.value_range is not None:
            lo, hi = self.value_range
            if self.images.min() < lo or self.images.max() > hi:
                raise DataError(f"{self.id}: pixel values outside {self.value_range}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (len(self.images),):
                raise DataError(f"{self.id}: {len(self.images)} images but labels of shape {labels.shape}")
            if self.num_classes is None:
                self.num_classes = int(labels.max()) + 1
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise DataError(f"{self.id}: labels outside [0, {self.num_classes})")
            self.labels = labels.astype(np.int64)

    def __len__(self):
        return len(self.images)

    def subset(self, start: int = 0, stop: int | None = None, split: str | None = None,
               id: str | None = None) -> "Dataset":
        sl = slice(start, stop)
        prov = dict(self.provenance, start=start, stop=stop)
        return Dataset(id or self.id, self.images[sl],
                       None if self.labels is None else self.labels[sl],
                       split or self.split, prov, self.num_classes, self.value_range)

    def content_checksum(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def parse_idx(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode an IDX byte string into an array of its declared type and shape."""
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated IDX header at byte {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{name}: bad IDX magic {raw[:2].hex()} at byte 0")
    type_code, rank = raw[2], raw[3]
    if type_code not in IDX_TYPES:
        raise FormatError(f"{name}: unknown IDX type byte 0x{type_code:02x} at byte 2")
    if rank == 0:
        raise FormatError(f"{name}: IDX rank 0 at byte 3")
    head = 4 + 4 * rank
    if len(raw) < head:
        raise FormatError(f"{name}: truncated IDX dimensions at byte {len(raw)}")
    dims = struct.unpack(f">{rank}I", raw[4:head])
    dtype = IDX_TYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(raw) - head
    if payload < expected:
        raise FormatError(f"{name}: IDX payload truncated at byte {len(raw)}; expected {head + expected} bytes")
    if payload > expected:
        raise FormatError(f"{name}: {payload - expected} trailing bytes after IDX payload at byte {head + expected}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_maybe_gzip(path), os.fspath(path))


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {arr.dtype} has no IDX type code")
    if arr.ndim == 0 or arr.ndim > 255:
        raise FormatError("IDX arrays need rank 1..255")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=IDX_TYPES[code]).tobytes()


def write_idx(path, arr, compress: bool = False) -> None:
    raw = encode_idx(arr)
    if compress:
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as fh:
        fh.write(raw)


def load_idx(images_path, labels_path=None, id: str | None = None, split: str = "test",
             num_classes: int | None = None, start: int = 0, stop: int | None = None) -> Dataset:
    """Load an IDX image file (rank 3 or 4) and optional rank-1 label file.

    uint8 pixels are scaled by 1/255; rank-3 files gain a channel axis.
    ``start``/``stop`` select a contiguous range of samples.
    """
    images = read_idx(images_path)
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise FormatError(f"{images_path}: image IDX must have rank 3 or 4, got {images.ndim}")
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        images = images.astype(np.float64) / 255.0
    else:
        images = images.astype(np.float64)
    prov = {"source": os.fspath(images_path), "format": "idx", "checksum": file_checksum(images_path)}
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path}: label IDX must have rank 1, got {labels.ndim}")
        if len(labels) != len(images):
            raise FormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images (byte 4)")
        labels = labels.astype(np.int64)
        prov["labels_source"] = os.fspath(labels_path)
        prov["labels_checksum"] = file_checksum(labels_path)
    if start or stop is not None:
        images = images[start:stop]
        labels = None if labels is None else labels[start:stop]
        prov.update(start=start, stop=stop)
    return Dataset(id or os.path.basename(os.fspath(images_path)), images, labels, split, prov, num_classes)


# ---------------------------------------------------------------------------
# CIFAR binary
# ---------------------------------------------------------------------------


def load_cifar_bin(path, id: str | None = None, split: str = "test", num_classes: int = 10) -> Dataset:
    """CIFAR-style records: one label byte then 3072 pixel bytes in R, G, B planes."""
    raw = _read_maybe_gzip(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    prov = {"source": os.fspath(path), "format": "cifar-bin", "checksum": file_checksum(path)}
    return Dataset(id or os.path.basename(os.fspath(path)), images, labels, split, prov,
                   max(num_classes, int(labels.max()) + 1))


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianSpec:
    """Isotropic Gaussian mixture; one component per class."""

    means: tuple
    sigma: float
    counts: tuple
    image_shape: tuple | None = None

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or len(means) == 0:
            raise ParameterError("means must be a non-empty (classes, D) array")
        counts = self.counts if np.ndim(self.counts) else (self.counts,) * len(means)
        if len(counts) != len(means) or any(int(c) != c or c <= 0 for c in counts):
            raise ParameterError("counts must be positive integers, one per class")
        if not self.sigma > 0:
            raise ParameterError("sigma must be positive")
        object.__setattr__(self, "counts", tuple(int(c) for c in counts))
        object.__setattr__(self, "means", tuple(map(tuple, means.tolist())))
        shape = self.image_shape or (1, 1, means.shape[1])
        if int(np.prod(shape)) != means.shape[1]:
            raise ParameterError(f"image_shape {shape} does not hold D={means.shape[1]} features")
        object.__setattr__(self, "image_shape", tuple(int(s) for s in shape))

    @property
    def dim(self) -> int:
        return len(self.means[0])


def synth_gaussians(spec: GaussianSpec, seed: int, id: str = "synthetic", split: str = "train",
                    stream: str = "data") -> Dataset:
    """Seeded samples from ``spec``, grouped by class and labelled by component.

    Values are unbounded, so the dataset's ``value_range`` is ``None``.
    """
    rng = substream(seed, stream)
    means = np.asarray(spec.means)
    parts, labels = [], []
    for c, (mu, n) in enumerate(zip(means, spec.counts)):
        parts.append(mu + spec.sigma * rng.standard_normal((n, len(mu))))
        labels.append(np.full(n, c, dtype=np.int64))
    x = np.concatenate(parts).reshape((-1,) + spec.image_shape)
    y = np.concatenate(labels)
    ds = Dataset(id, x, y, split, {"source": "synthetic", "format": "gaussian-mixture", "seed": seed},
                 len(means), None)
    ds.provenance["checksum"] = ds.content_checksum()
    return ds


def offset_ramp_spec(count: int, offset: float = 5.0, contrast: float = 0.3, sigma: float = 1.0,
                     side: int = 4) -> GaussianSpec:
    """Two overlapping classes on a ``side x side`` grid.

    Both class means share a constant ``offset`` (the component cross-entropy
    cannot see) and differ by plus or minus a linear ramp of half-range
    ``contrast`` over the flattened pixels.
    """
    ramp = np.linspace(-1.0, 1.0, side * side) * contrast
    return GaussianSpec((tuple(offset + ramp), tuple(offset - ramp)), sigma, (count, count), (1, side, side))


def offset_ramp_task(seed: int, train_count: int = 20_000, val_count: int = 500, test_count: int = 1000,
                     **kwargs) -> tuple:
    """Train/val/test splits of :func:`offset_ramp_spec`, each from its own substream."""
    return tuple(synth_gaussians(offset_ramp_spec(n, **kwargs), seed, id="offset-ramp", split=split,
                                 stream=f"data:{split}")
                 for split, n in (("train", train_count), ("val", val_count), ("test", test_count)))
