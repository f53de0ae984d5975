"""Seeded random streams.

Every random draw in the package comes from a ``numpy.random.Generator``
backed by Philox-4x64, a counter-based bit generator whose output is defined
by (key, counter) alone and is therefore identical across platforms.

Sub-streams are keyed by hashing the master seed together with a purpose
path, e.g. ``derive_seed(7, "stage", 2, "fold", 4, "train")``.  Because the
key depends only on *what* the stream is for, the order in which folds or
stages are executed (or the number of worker processes) cannot change any
draw.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "make_rng", "RngStream"]

RngStream = np.random.Generator

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *path: object) -> int:
    """Return a 64-bit seed for the stream named by ``path`` under ``seed``.

    The key is the first 8 bytes (little-endian) of BLAKE2b over the decimal
    master seed followed by each path element's ``str()``, separated by
    ``/``.
    """
    text = "/".join([str(int(seed) & _MASK64), *map(str, path)])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *path: object) -> np.random.Generator:
    """Philox generator for ``derive_seed(seed, *path)`` (or ``seed`` itself
    when no path is given)."""
    key = derive_seed(seed, *path) if path else int(seed) & _MASK64
    return np.random.Generator(np.random.Philox(key=key))
