"""Counter-based deterministic random streams.

Every stream is addressed by (master seed, path, draw counter). The value of
any draw is a pure function of that triple, so independent consumers that
derive disjoint child paths produce identical numbers regardless of the order
or parallelism with which they run. The underlying bit generator is Philox,
keyed from a SHA-256 digest of the address, so there is no platform-dependent
state in the core.

Convention: a leaf stream is consumed by exactly one logical owner. Shared
work must fork children via ``child(...)`` instead of sharing a stream object.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RandomStream:
    """Hierarchical, counter-addressed random stream."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._counter = 0

    def child(self, *ids) -> "RandomStream":
        """Derive an independent stream under this one's path."""
        return RandomStream(self.seed, self.path + tuple(ids))

    def _generator(self, counter: int) -> np.random.Generator:
        enc = repr((self.seed, self.path, counter)).encode("utf-8")
        digest = hashlib.sha256(enc).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def _next(self) -> np.random.Generator:
        gen = self._generator(self._counter)
        self._counter += 1
        return gen

    # -- draws ------------------------------------------------------------

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        return self._next().normal(loc=loc, scale=scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._next().uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._next().integers(low, high, size=size)

    def random(self, size=None):
        return self._next().random(size=size)

    def permutation(self, n: int):
        return self._next().permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self._next().choice(a, size=size, replace=replace)

    def __repr__(self):  # pragma: no cover
        return f"RandomStream(seed={self.seed}, path={self.path}, counter={self._counter})"
