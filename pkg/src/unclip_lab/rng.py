"""Splittable, counter-based random streams.

A stream is identified by a root seed plus a path of names. Child streams
are derived by hashing, so any stage of the pipeline can be re-run in
isolation with identical randomness. Backed by the Philox counter-based
bit generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed, path):
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for name in path:
        h.update(b"/")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RngStream:
    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(seed, self.path)))

    def split(self, name):
        """Independent child stream; same (seed, path, name) always yields the same stream."""
        return RngStream(self.seed, self.path + (name,))

    def normal(self, shape, dtype=np.float32):
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32):
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size=None, replace=True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def state_digest(self):
        """Stable identifier of the stream (seed + path), recorded in checkpoints."""
        return f"{self.seed}:{'/'.join(self.path)}"
