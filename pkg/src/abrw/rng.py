"""Counter-based random numbers.

Every stream is a pure function ``(key, counter) -> 64 bits``: the SplitMix64
output function applied to ``key + (counter + 1) * GOLDEN``. Keys are derived
from seeds and identities (replicate index, ball label) with BLAKE2b, so any
stream position can be recomputed without replaying the stream.
"""
from __future__ import annotations

import hashlib
import math
import os

import numba as nb
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
INV53 = 1.0 / (1 << 53)

SEED_ENV = "ABRW_SEED"
DEFAULT_SEED = 20240611


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def bits(key: int, counter: int) -> int:
    return _mix((key + (counter + 1) * GOLDEN) & MASK64)


def uniform(key: int, counter: int) -> float:
    """Uniform on [0, 1) with 53 random bits."""
    return (bits(key, counter) >> 11) * INV53


def exponential(key: int, counter: int) -> float:
    return -math.log1p(-uniform(key, counter))


def derive_key(*parts) -> int:
    """64-bit key from an arbitrary tuple of ints/strings/tuples (order-sensitive)."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def seed_bytes(seed: int) -> bytes:
    """Canonical 256-bit encoding of a non-negative integer seed."""
    if seed < 0 or seed >= 1 << 256:
        raise ValueError("seed must be a 256-bit non-negative integer")
    return seed.to_bytes(32, "little")


def replicate_seed(master: int, k: int) -> int:
    """Seed for replicate ``k``: a pure function of ``(master, k)``."""
    h = hashlib.blake2b(seed_bytes(master) + k.to_bytes(8, "little"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def resolve_seed(flag=None, config=None) -> tuple[int, str]:
    """Seed precedence: flag > environment > config > default. Returns (seed, source)."""
    if flag is not None:
        return int(flag), "flag"
    env = os.environ.get(SEED_ENV)
    if env:
        return int(env), "environment"
    if config is not None:
        return int(config), "config"
    return DEFAULT_SEED, "default"


# numba versions used by the event kernels; must agree bit-for-bit with the above.

_G = np.uint64(GOLDEN)


@nb.njit(inline="always")
def nb_bits(key, counter):
    z = key + (counter + np.uint64(1)) * _G
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(inline="always")
def nb_uniform(key, counter):
    return float(nb_bits(key, counter) >> np.uint64(11)) * INV53


class Stream:
    """Sequential view of a counter-based stream (convenience for Python callers)."""

    def __init__(self, key: int, counter: int = 0):
        self.key = key & MASK64
        self.counter = counter

    def uniform(self) -> float:
        u = uniform(self.key, self.counter)
        self.counter += 1
        return u

    def exponential(self) -> float:
        return -math.log1p(-self.uniform())


def uniforms(key: int, start: int, n: int) -> np.ndarray:
    """Vectorised ``[uniform(key, start + i) for i in range(n)]``."""
    with np.errstate(over="ignore"):
        z = np.uint64(key & MASK64) + (np.arange(start, start + n, dtype=np.uint64) + np.uint64(1)) * _G
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * INV53
