"""
Seeded random streams
Philox is counter-based, so a (seed, stream name) pair always yields the
same sequence and sibling streams never overlap
"""

import hashlib

import numpy as np


def _derive_key(seed, path):
    digest = hashlib.blake2b(f"{seed}:{path}".encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    def __init__(self, seed, path="root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, path)))

    def split(self, name):
        """Independent child stream; the parent stream is not advanced"""
        return SeededRng(self.seed, f"{self.path}/{name}")

    def normal(self, shape, std=1.0):
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path='{self.path}')"
