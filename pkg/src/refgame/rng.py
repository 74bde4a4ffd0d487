"""Seedable, splittable random streams on top of numpy's Philox generator.

Philox is counter-based, so a stream is fully determined by its 128-bit key.
We derive keys by hashing (seed, label-path) with SHA-256, which makes child
streams reproducible and statistically independent regardless of the order in
which they are created or consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    """A reproducible random stream identified by a seed and a label path.

    Two streams with the same seed and path produce identical draw sequences.
    ``child(label)`` derives a new independent stream; children with distinct
    labels never share state with each other or with their parent.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        material = repr((self.seed, self.path)).encode("utf-8")
        key = int.from_bytes(hashlib.sha256(material).digest()[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "RngStream":
        """Derive an independent stream labelled relative to this one."""
        return RngStream(self.seed, self.path + (str(label),))

    # Draw methods delegate to the underlying numpy Generator. Only the
    # draws the simulator needs are exposed, to keep stream usage auditable.

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def gumbel(self, size=None) -> np.ndarray:
        return self._gen.gumbel(0.0, 1.0, size)

    def standard_exponential(self, size=None) -> np.ndarray:
        return self._gen.standard_exponential(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs, size: int) -> np.ndarray:
        """Sample ``size`` indices from a probability vector via inverse CDF."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        if abs(cdf[-1] - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {cdf[-1]}, expected 1")
        u = self._gen.random(size)
        return np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"
