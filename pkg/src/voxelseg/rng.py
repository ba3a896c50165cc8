"""Deterministic random streams.

Every stochastic routine in the package takes an RngStream instead of using
global numpy state. A stream is fully determined by its 64-bit seed (PCG64
under the hood), and substreams derived from (seed, index) are independent of
each other, so per-sample / per-tree / per-member work can run in parallel and
still reproduce the serial results bit for bit.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    """Seeded PCG64 generator with derivable substreams."""

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def substream(self, *indices: int) -> "RngStream":
        """Child stream for (seed, *indices); same indices -> same stream."""
        return RngStream(self.seed, self._spawn_key + tuple(int(i) for i in indices))

    # Convenience passthroughs so call sites read like a numpy Generator.
    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def shuffle(self, x):
        self.gen.shuffle(x)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, spawn_key={self._spawn_key})"
