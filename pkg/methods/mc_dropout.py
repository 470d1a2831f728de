"""
Disentangle - MC Dropout
One network trained with dropout after every hidden activation; dropout stays
active at prediction time and each pass is one member.
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from core.dgp import Dataset
from core.errors import ContractViolation, HarnessError, MethodError
from core.nn import MlpConfig, MlpPredictor, TrainConfig, train_mlp
from methods.base import SecondOrderPredictor

logger = logging.getLogger(__name__)


class McDropoutPredictor(SecondOrderPredictor):
    name = "mc_dropout"

    def __init__(self, model: MlpPredictor, samples: int):
        super().__init__()
        self.model = model
        self.default_samples = samples

    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        passes = [self.model.predict_batch(xs, dropout_active=True) for _ in range(d or self.default_samples)]
        return np.stack([p[0] for p in passes]), np.stack([p[1] for p in passes])

    def save(self, path):
        self.model.params.save(Path(path) / "weights.npz")


def fit_mc_dropout(data: Dataset, rate: float, mcfg: MlpConfig, tcfg: TrainConfig,
                   samples: int = 500) -> McDropoutPredictor:
    if not 0.0 < rate < 1.0:
        raise ContractViolation(f"dropout rate must be in (0, 1), got {rate}")
    try:
        model = train_mlp(data, replace(mcfg, dropout_rate=rate), tcfg, label="mc_dropout")
    except HarnessError as e:
        raise MethodError("mc_dropout", str(e)) from e
    logger.info(f"MC dropout trained: rate={rate} n={data.n}")
    return McDropoutPredictor(model, samples)
