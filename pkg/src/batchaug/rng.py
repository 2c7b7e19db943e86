"""Counter-based splittable pseudo-random streams.

The generator is a SplitMix64-style mixer applied to (seed, counter), so any
output is a pure function of those two integers: the same (seed, counter)
yields the same value on every platform and every run.  Streams can be split
by label into statistically independent child streams, which is what lets
sampler seeds be synchronized across simulated workers while augmentation
seeds stay distinct.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

ALGORITHM_ID = "splitmix64"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on uint64 arrays."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _hash_label(label) -> int:
    """Deterministic 64-bit hash of a split label (FNV-1a for strings)."""
    if isinstance(label, (int, np.integer)):
        data = int(label).to_bytes(8, "little", signed=False) if label >= 0 else (
            (int(label) & _MASK64).to_bytes(8, "little"))
    elif isinstance(label, str):
        data = label.encode("utf-8")
    else:
        raise ContractViolation(f"split label must be str or int, got {type(label)!r}")
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class RngStream:
    """A deterministic stream identified by (seed, counter).

    Drawing n values consumes n counter positions.  ``split`` derives a child
    stream whose seed is a hash of the parent seed and the label; the child
    starts at counter 0 and never interferes with the parent.
    """

    __slots__ = ("seed", "counter")

    algorithm_id = ALGORITHM_ID

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed:#018x}, counter={self.counter})"

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.counter)

    def split(self, *labels) -> "RngStream":
        """Child stream derived from this stream's seed and the given labels."""
        seed = np.uint64([self.seed])
        for label in labels:
            seed = _mix64(seed ^ np.uint64(_hash_label(label))) + _GOLDEN
        return RngStream(int(_mix64(seed)[0]))

    def next_u64(self, n: int) -> np.ndarray:
        """The next n raw 64-bit outputs; advances the counter by n."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0,
                dtype=np.float64) -> np.ndarray:
        """Uniform draws in [lo, hi)."""
        if not lo < hi:
            raise ContractViolation(f"uniform requires lo < hi, got [{lo}, {hi})")
        n = int(np.prod(shape)) if shape else 1
        bits = self.next_u64(n)
        u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = lo + (hi - lo) * u
        # rounding of lo + (hi-lo)*u can land exactly on hi; clamp back inside
        np.minimum(out, np.nextafter(hi, lo), out=out)
        out = out.astype(dtype, copy=False)
        return out.reshape(shape) if shape else out[0]

    def randint(self, n: int, lo: int, hi: int) -> np.ndarray:
        """n integer draws in [lo, hi).  Modulo bias is O(range / 2^64)."""
        if not lo < hi:
            raise ContractViolation(f"randint requires lo < hi, got [{lo}, {hi})")
        span = np.uint64(hi - lo)
        return (self.next_u64(n) % span).astype(np.int64) + lo

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform((m,))          # (0, 1]
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = z.astype(dtype, copy=False)
        return z.reshape(shape) if shape else z[0]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self.next_u64(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_uniform(stream: RngStream, shape, lo: float, hi: float,
                dtype=np.float64) -> np.ndarray:
    """Uniform tensor in [lo, hi); advances the stream's counter."""
    return stream.uniform(tuple(shape), lo, hi, dtype=dtype)
