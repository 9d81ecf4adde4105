"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"EOODCKPT"
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON
    blobs        float64 parameter data, in header order
    digest       32 bytes  SHA-256 of every preceding byte

The header holds ``architecture``, ``params`` (name, shape, offset, nbytes)
and free-form ``metadata``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .classifier import Classifier, model_from_arrays
from .errors import FormatError

MAGIC = b"EOODCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 32


@dataclass
class Checkpoint:
    architecture: str
    params: dict
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_model(self) -> Classifier:
        return model_from_arrays(self.architecture, self.params)


def checkpoint_from_model(model: Classifier, metadata: dict | None = None) -> Checkpoint:
    params = {k: v.numpy() for k, v in model.params.items()}
    return Checkpoint(model.descriptor, params, dict(metadata or {}))


def params_digest(params: dict) -> str:
    """SHA-256 over parameter names, shapes and little-endian float64 bytes."""
    h = hashlib.sha256()
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def model_checksum(model: Classifier) -> str:
    return params_digest({k: v.data for k, v in model.params.items()})


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": ckpt.format_version,
        "architecture": ckpt.architecture,
        "params": entries,
        "metadata": ckpt.metadata,
    }, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, ckpt.format_version, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size + _DIGEST:
        raise FormatError(f"checkpoint truncated: {len(raw)} bytes")
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint digest mismatch (file truncated or corrupted)")
    start = _PREFIX.size
    if start + header_len > len(body):
        raise FormatError(f"checkpoint header runs past end of file at byte {start}")
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header at byte {start}: {exc}") from exc
    blob_base = start + header_len
    params = {}
    for entry in header["params"]:
        lo = blob_base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(body):
            raise FormatError(f"parameter {entry['name']} runs past end of file at byte {lo}")
        arr = np.frombuffer(body[lo:hi], dtype="<f8").astype(np.float64)
        params[entry["name"]] = arr.reshape(entry["shape"])
    return Checkpoint(header["architecture"], params, header.get("metadata", {}), version)


def save(ckpt: Checkpoint, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
