"""Reproducible counter-based random streams.

Every stochastic component draws from an :class:`RngStream`, an immutable
(master_seed, stream_index) pair.  The pair is hashed into a 128-bit key for
a Philox counter-based bit generator, so distinct pairs give statistically
independent streams and the same pair reproduces the same draws bit for bit.
Streams split without coordination: ``stream.child(tag, ...)`` appends tags
to the index path, which is how replicas and per-purpose substreams are
derived in parallel runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One SplitMix64 mixing round; full 64-bit avalanche."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _key128(master_seed: int, path: tuple[int, ...]) -> np.ndarray:
    """Fold (master_seed, *path) into a 2x64-bit Philox key."""
    h = splitmix64(master_seed & _MASK64)
    for tag in path:
        h = splitmix64(h ^ (tag & _MASK64))
    return np.array([h, splitmix64(h ^ _GOLDEN)], dtype=np.uint64)


@dataclass(frozen=True)
class RngStream:
    """Immutable handle for one independent random stream.

    master_seed: 64-bit experiment seed.
    stream_index: replica/purpose identifier (int or tuple of ints).
    """

    master_seed: int
    stream_index: tuple[int, ...] = ()

    def __post_init__(self):
        idx = self.stream_index
        if isinstance(idx, int):
            idx = (idx,)
        object.__setattr__(self, "stream_index", tuple(int(t) for t in idx))
        object.__setattr__(self, "master_seed", int(self.master_seed))

    def child(self, *tags: int) -> "RngStream":
        """Derive an independent substream by extending the index path."""
        return RngStream(self.master_seed, self.stream_index + tuple(tags))

    def key(self) -> np.ndarray:
        return _key128(self.master_seed, self.stream_index)

    def generator(self) -> np.random.Generator:
        """Fresh generator at counter zero; same stream, same draws."""
        return np.random.Generator(np.random.Philox(key=self.key()))
