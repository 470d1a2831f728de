"""
Disentangle - Random Streams
Seeded, splittable random streams on numpy's counter-based Philox generator
"""

import hashlib
import logging
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

ALGORITHM = "philox-4x64"


def _derive_seed(parent_seed: int, tag: str, index: int) -> int:
    digest = hashlib.sha256(f"{parent_seed}:{tag}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RandomStream:
    """
    Single-owner random stream.

    Identical seeds give identical sequences. Child streams are derived by hashing
    (parent seed, purpose tag, index), so dataset draws and procedural draws never
    share state. Hand each parallel task its own child stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = ALGORITHM
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, algorithm={self.algorithm!r})"

    def split(self, tag: str, index: int = 0) -> "RandomStream":
        return RandomStream(_derive_seed(self.seed, tag, index))

    # draws

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> Union[float, np.ndarray]:
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> Union[float, np.ndarray]:
        return self._gen.normal(loc, scale, size)

    def gamma(self, shape: float, size=None) -> Union[float, np.ndarray]:
        # numpy's Gamma sampler is Marsaglia-Tsang, boosted for shape < 1
        return self._gen.standard_gamma(shape, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p_keep: float, shape) -> np.ndarray:
        return (self._gen.random(shape) < p_keep).astype(np.float64)
