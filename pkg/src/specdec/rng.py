"""Deterministic random streams built on SplitMix64.

Every randomized subsystem draws from its own substream derived by seed
hashing, never by sharing a mutable cursor. The generator is plain 64-bit
integer arithmetic, so streams are identical on every platform.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _label_hash(label) -> int:
    if isinstance(label, str):
        # FNV-1a over utf-8 bytes; stable across platforms and runs.
        h = 0xCBF29CE484222325
        for b in label.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK
        return h
    return int(label) & _MASK


def derive_seed(seed: int, *labels) -> int:
    """Hash (seed, labels...) into a fresh subseed."""
    z = seed & _MASK
    for lab in labels:
        z = _mix((z + _GOLDEN) ^ _label_hash(lab))
    return z


class Rng:
    """SplitMix64 stream: state advances by the golden-ratio increment and
    each output is the mixed state. Substreams come from ``split``, which
    derives a new seed rather than sharing position."""

    __slots__ = ("seed", "_state", "_spare_normal")

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self._state = self.seed
        self._spare_normal = None

    def split(self, *labels) -> "Rng":
        return Rng(derive_seed(self.seed, *labels))

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is negligible for n << 2^64."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def categorical(self, probs: np.ndarray) -> int:
        """Sample an index from an unnormalized nonnegative weight vector."""
        w = np.asarray(probs, dtype=np.float64)
        total = w.sum()
        if not total > 0.0:
            raise ValueError("categorical needs positive total mass")
        cum = np.cumsum(w / total)
        idx = int(np.searchsorted(cum, self.uniform(), side="right"))
        if idx >= len(w):  # guard against cum[-1] < 1 by rounding
            idx = int(np.flatnonzero(w)[-1])
        return idx

    def uniform_array(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self._state) + idx * np.uint64(_GOLDEN)
            z = states
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self._state = int(states[-1]) if n else self._state
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self) -> float:
        if self._spare_normal is not None:
            v = self._spare_normal
            self._spare_normal = None
            return v
        u1 = self.uniform()
        u2 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape, scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        m = n + (n & 1)
        u = self.uniform_array(m)
        u1 = np.clip(u[0::2], 2.0**-53, None)
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(m, dtype=np.float64)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return (out[:n] * scale).reshape(shape).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample_without_replacement(self, n: int, m: int) -> np.ndarray:
        """m distinct indices from range(n), in draw order."""
        if m > n:
            raise ValueError("cannot sample more than population")
        pool = np.arange(n, dtype=np.int64)
        for i in range(m):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m].copy()
