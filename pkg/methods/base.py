"""
Disentangle - Method Base
Shared interface of the eight uncertainty methods: every trained method exposes
its second-order distribution through the same sampling adapter.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from config import VARIANCE_CEILING, VARIANCE_FLOOR
from core.decompose import SecondOrderSample, variance_decomposition_arrays
from core.errors import ContractViolation, MethodError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridUncertainty:
    """Per-point mixture mean and aleatoric / epistemic variance on a query grid"""

    xs: np.ndarray
    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.aleatoric + self.epistemic


class SecondOrderPredictor(ABC):
    """
    A trained method. `members(xs, d)` returns (means, variances) of shape
    (d, len(xs)); row j is one draw theta_j from q(theta | x), evaluated jointly
    over the whole grid so that a weight sample stays one function.

    Prediction consumes the method's inference stream, so a predictor is
    single-owner.
    """

    name: str = "method"
    default_samples: int = 1

    def __init__(self):
        self.warnings: List[str] = []

    @abstractmethod
    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        ...

    def warn(self, message: str):
        logger.warning(f"{self.name}: {message}")
        self.warnings.append(message)

    def sample_grid(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
        if d is not None and d < 1:
            raise ContractViolation(f"need at least one member, got d={d}")
        means, variances = self.members(xs, d)
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise MethodError(self.name, "non-finite member prediction")
        return means, np.clip(variances, VARIANCE_FLOOR, VARIANCE_CEILING)

    def sample_thetas(self, x: float, d: Optional[int] = None) -> SecondOrderSample:
        """d first-order predictions at a single query point"""
        means, variances = self.sample_grid(np.array([x]), d)
        return SecondOrderSample.from_arrays(means[:, 0], variances[:, 0], x)

    def uncertainty(self, xs: np.ndarray, d: Optional[int] = None) -> GridUncertainty:
        xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
        means, variances = self.sample_grid(xs, d)
        mean, aleatoric, epistemic = variance_decomposition_arrays(means, variances)
        return GridUncertainty(xs, mean, aleatoric, epistemic)

    def save(self, path) -> None:
        """Persist trained weights; methods without a weight vector write nothing"""
        return None
