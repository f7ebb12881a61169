"""Counter-based splitmix64 generator.

Every random draw in the package goes through :class:`SplitMix64` so that
datasets, minibatch indices, gate draws and policy noise are bit-identical
across runs and platforms (numpy's generators are not guaranteed stable
across numpy releases).
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


class SplitMix64:
    """Stateless-core generator: output ``i`` is ``mix(key + (i + 1) * golden)``.

    The only mutable state is the draw counter, so a stream can be replayed
    from ``(seed, counter)`` alone.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self._key = np.uint64(self.seed)
        self.counter = int(counter)

    def spawn(self, label: str) -> "SplitMix64":
        """Independent child stream keyed by ``label``; does not advance this stream."""
        child = int(_mix(np.array([self.seed ^ _label_key(label)], dtype=np.uint64))[0])
        return SplitMix64(child)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self._key + idx * _GOLDEN)

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws on [0, 1) with 53 bits of resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def uniform_range(self, low: float, high: float, size) -> np.ndarray:
        return low + (high - low) * self.uniform(size)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws (Box-Muller, both outputs used)."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(size)

    def integers(self, high: int, size) -> np.ndarray:
        """Integers in [0, high)."""
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def bernoulli(self, p: float, size=None):
        u = self.uniform(size)
        if size is None:
            return int(u < p)
        return (u < p).astype(np.int64)
