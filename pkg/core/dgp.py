"""
Disentangle - Data-Generating Process
Heteroscedastic synthetic regression with known ground truth:
x ~ Beta(1.2, 0.5),  y = sin(1 / (5 (x + 0.16)^3)) + eps,  eps ~ N(0, x^4)
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Union

import numpy as np

from core.errors import ContractViolation
from core.rng import RandomStream

logger = logging.getLogger(__name__)

Real = Union[float, np.ndarray]


def f_true(x: Real) -> Real:
    """True conditional mean"""
    return np.sin(1.0 / (5.0 * (np.asarray(x, dtype=np.float64) + 0.16) ** 3))


def sigma2_true(x: Real) -> Real:
    """True noise variance"""
    return np.asarray(x, dtype=np.float64) ** 4


MEAN_FUNCTIONS: Dict[str, Callable[[Real], Real]] = {"sin_cubic": f_true}
NOISE_FUNCTIONS: Dict[str, Callable[[Real], Real]] = {"quartic": sigma2_true}


@dataclass(frozen=True)
class DgpSpec:
    beta_alpha: float = 1.2
    beta_beta: float = 0.5
    mean_fn: str = "sin_cubic"
    noise_fn: str = "quartic"

    def __post_init__(self):
        if self.beta_alpha <= 0 or self.beta_beta <= 0:
            raise ContractViolation(f"Beta shape parameters must be positive, got ({self.beta_alpha}, {self.beta_beta})")
        if self.mean_fn not in MEAN_FUNCTIONS:
            raise ContractViolation(f"unknown mean function '{self.mean_fn}'")
        if self.noise_fn not in NOISE_FUNCTIONS:
            raise ContractViolation(f"unknown noise function '{self.noise_fn}'")

    def mean(self, x: Real) -> Real:
        return MEAN_FUNCTIONS[self.mean_fn](x)

    def variance(self, x: Real) -> Real:
        return NOISE_FUNCTIONS[self.noise_fn](x)


@dataclass(frozen=True)
class Dataset:
    """One realisation of D_N; immutable once generated"""

    xs: np.ndarray
    ys: np.ndarray
    seed: int
    n: int = field(init=False)

    def __post_init__(self):
        xs = np.array(self.xs, dtype=np.float64).reshape(-1)
        ys = np.array(self.ys, dtype=np.float64).reshape(-1)
        if xs.size != ys.size:
            raise ContractViolation(f"{xs.size} covariates but {ys.size} responses")
        if xs.size and (np.any(xs <= 0.0) or np.any(xs >= 1.0)):
            raise ContractViolation("covariates must lie strictly inside (0, 1)")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "n", int(xs.size))

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.xs[indices], self.ys[indices], self.seed)

    def to_csv(self, path: Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "y"])
            for x, y in zip(self.xs, self.ys):
                writer.writerow([f"{x:.17g}", f"{y:.17g}"])

    @classmethod
    def from_csv(cls, path: Path, seed: int = -1) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["x"]) for r in rows], [float(r["y"]) for r in rows], seed)


def sample_beta(stream: RandomStream, alpha: float, beta: float, count: int) -> np.ndarray:
    """Beta draws as G1 / (G1 + G2); values that round to 0 or 1 are redrawn"""
    if alpha <= 0 or beta <= 0:
        raise ContractViolation(f"Beta shape parameters must be positive, got ({alpha}, {beta})")
    if count < 0:
        raise ContractViolation(f"count must be nonnegative, got {count}")
    out = np.empty(count)
    pending = np.arange(count)
    while pending.size:
        g1 = stream.gamma(alpha, pending.size)
        g2 = stream.gamma(beta, pending.size)
        with np.errstate(invalid="ignore"):
            draw = g1 / (g1 + g2)
        ok = np.isfinite(draw) & (draw > 0.0) & (draw < 1.0)
        out[pending[ok]] = draw[ok]
        pending = pending[~ok]
    return out


def generate_dataset(spec: DgpSpec, n: int, seed: int) -> Dataset:
    """Draw n points from the DGP; bit-reproducible for a given seed"""
    if n <= 0:
        raise ContractViolation(f"dataset size must be positive, got {n}")
    root = RandomStream(seed).split("dataset")
    xs = sample_beta(root.split("covariates"), spec.beta_alpha, spec.beta_beta, n)
    noise = root.split("noise").normal(0.0, 1.0, n)
    ys = spec.mean(xs) + np.sqrt(spec.variance(xs)) * noise
    logger.debug(f"Generated dataset n={n} seed={seed}")
    return Dataset(xs, ys, seed)


def evaluation_grid(count: int, lo: float, hi: float) -> np.ndarray:
    """Equally spaced evaluation points on [lo, hi]"""
    if count < 1 or not (0.0 < lo < hi < 1.0):
        raise ContractViolation(f"bad test grid ({count}, {lo}, {hi})")
    return np.linspace(lo, hi, count)

