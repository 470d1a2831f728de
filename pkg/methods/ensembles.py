"""
Disentangle - Ensembles
Deep ensembles (same data, different procedural seeds) and bootstrap ensembles
(each member sees its own resample of the data)
"""

import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.dgp import Dataset
from core.errors import ContractViolation, HarnessError, MethodError
from core.nn import MlpConfig, MlpPredictor, TrainConfig, train_mlp
from core.rng import RandomStream
from methods.base import SecondOrderPredictor

logger = logging.getLogger(__name__)


class EnsemblePredictor(SecondOrderPredictor):
    """d independently trained MLPs; the second-order sample is the member set itself"""

    def __init__(self, name: str, models: List[MlpPredictor]):
        super().__init__()
        self.name = name
        self.models = models
        self.default_samples = len(models)

    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        if d is not None and d != len(self.models):
            raise ContractViolation(f"{self.name} has exactly {len(self.models)} members, asked for {d}")
        preds = [m.predict_batch(xs) for m in self.models]
        return np.stack([p[0] for p in preds]), np.stack([p[1] for p in preds])

    def save(self, path):
        for i, model in enumerate(self.models):
            model.params.save(Path(path) / f"member_{i:02d}.npz")


def _check_members(method: str, d: int, seeds: Sequence[int]):
    if d < 2:
        raise ContractViolation(f"{method} needs at least two members, got d={d}")
    if len(seeds) != d:
        raise ContractViolation(f"{method}: {d} members but {len(seeds)} procedural seeds")


def fit_deep_ensemble(data: Dataset, d: int, seeds: Sequence[int], mcfg: MlpConfig,
                      tcfg: TrainConfig) -> EnsemblePredictor:
    _check_members("deep_ensemble", d, seeds)
    models = []
    for i, seed in enumerate(seeds):
        try:
            models.append(train_mlp(data, mcfg, replace(tcfg, seed=int(seed)), label=f"deep_ensemble[{i}]"))
        except HarnessError as e:
            raise MethodError("deep_ensemble", str(e), member=i) from e
    logger.info(f"Deep ensemble trained: {d} members on n={data.n}")
    return EnsemblePredictor("deep_ensemble", models)


def bootstrap_indices(n: int, fraction: float, member_seed: int, dataset_seed: int) -> np.ndarray:
    """ceil(fraction * n) indices drawn with replacement; fixed by (dataset seed, member seed)"""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"bootstrap fraction must be in (0, 1], got {fraction}")
    stream = RandomStream(member_seed).split("bootstrap", int(dataset_seed) & 0xFFFFFFFF)
    return stream.integers(0, n, math.ceil(fraction * n))


def fit_bootstrap_ensemble(data: Dataset, d: int, seeds: Sequence[int], mcfg: MlpConfig,
                           tcfg: TrainConfig, fraction: float = 0.6) -> EnsemblePredictor:
    _check_members("bootstrap_ensemble", d, seeds)
    models = []
    for i, seed in enumerate(seeds):
        resample = data.subset(bootstrap_indices(data.n, fraction, int(seed), data.seed))
        try:
            models.append(train_mlp(resample, mcfg, replace(tcfg, seed=int(seed)),
                                    label=f"bootstrap_ensemble[{i}]"))
        except HarnessError as e:
            raise MethodError("bootstrap_ensemble", str(e), member=i) from e
    logger.info(f"Bootstrap ensemble trained: {d} members on {math.ceil(fraction * data.n)}/{data.n} resampled points")
    return EnsemblePredictor("bootstrap_ensemble", models)
