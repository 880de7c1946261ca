"""Deterministic RNG substreams.

Every stochastic component draws from a generator derived from
``(seed, *key)`` rather than from shared mutable state, so parallel
execution order and checkpoint resume never change results.
"""

import hashlib

import numpy as np


def substream(seed: int, *key) -> np.random.Generator:
    """Return a generator keyed by ``(seed, *key)``.

    Key parts may be ints or strings; the mapping is stable across
    processes and platforms (unlike builtin ``hash``).
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for part in key:
        h.update(b"/")
        h.update(str(part).encode())
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))
