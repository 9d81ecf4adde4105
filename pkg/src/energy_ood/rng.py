"""Named random substreams derived from a single master seed.

Each consumer (data, transforms, init, training, ...) gets its own generator
keyed by ``(master_seed, label)``, so adding draws to one consumer never
shifts the values another consumer sees.
"""

import hashlib

import numpy as np

from .errors import ParameterError

MAX_SEED = 2**64 - 1


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ParameterError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def substream_seed(seed: int, label: str) -> int:
    """128-bit integer obtained by keyed hashing of ``label`` under ``seed``."""
    key = check_seed(seed).to_bytes(8, "little")
    digest = hashlib.blake2b(label.encode("utf-8"), key=key, digest_size=16).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Generator for the named stream; ``extra`` integers select a sub-index."""
    entropy = [substream_seed(seed, label), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
