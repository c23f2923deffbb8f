"""Deterministic, splittable random streams.

Streams are keyed by a (seed, counter) pair hashed into a Philox key, so any
two distinct pairs give statistically independent, platform-stable sequences.
Data generation, parameter init, dropout and batch shuffling each take their
own split so changing one never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _philox_key(seed: int, counter: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}|{counter}|{tag}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """One deterministic stream; identical (seed, counter, tag) means identical draws."""

    def __init__(self, seed: int, counter: int = 0, tag: str = ""):
        self.seed = int(seed)
        self.counter = int(counter)
        self.tag = tag
        self._gen = np.random.Generator(np.random.Philox(key=_philox_key(self.seed, self.counter, tag)))

    def split(self, tag: str) -> "RngStream":
        """Independent child stream; stable under unrelated code changes."""
        return RngStream(self.seed, self.counter, f"{self.tag}/{tag}")

    def child(self, counter: int) -> "RngStream":
        """Independent stream indexed by an integer (epoch, step, ...)."""
        return RngStream(self.seed, counter, self.tag)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def unit_floats(self, shape) -> np.ndarray:
        """Uniform [0, 1) at float32 precision; cheap source for masks."""
        return self._gen.random(size=shape, dtype=np.float32)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter}, tag={self.tag!r})"
