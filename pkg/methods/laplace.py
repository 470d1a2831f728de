"""
Disentangle - Laplace Approximation
Diagonal generalized Gauss-Newton Laplace posterior around a MAP network.
Prediction draws weight perturbations phi ~ N(phi_MAP, diag(1 / (GGN + prior precision))).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import ParameterVector, Tape
from core.dgp import Dataset
from core.errors import ContractViolation, HarnessError, MethodError
from core.nn import LOG_VAR_MAX, LOG_VAR_MIN, MLP, MlpConfig, MlpPredictor, TrainConfig, train_mlp
from core.rng import RandomStream
from methods.base import SecondOrderPredictor

logger = logging.getLogger(__name__)

# Fisher of the Gaussian NLL with respect to the log-variance output
LOG_VARIANCE_FISHER = 0.5


@dataclass(frozen=True)
class LaplaceConfig:
    prior_precision: float = 1.0
    noise: float = 2.0
    posterior_samples: int = 1000

    def __post_init__(self):
        if self.prior_precision <= 0 or self.noise <= 0 or self.posterior_samples < 1:
            raise ContractViolation(f"invalid Laplace config {self}")


def ggn_diagonal(mlp: MLP, params: ParameterVector, xs: np.ndarray, noise: float) -> np.ndarray:
    """Flat GGN diagonal over the training inputs, mean head weighted by 1 / noise^2"""
    tape = Tape()
    out = mlp.forward(tape, tape.bind(params), xs)
    n = np.asarray(xs).size
    heads = [(out["mean"], np.full(n, 1.0 / noise ** 2)),
             (out["log_variance"], np.full(n, LOG_VARIANCE_FISHER))]
    return params.flatten_like(ad.hessian_diag_ggn(tape, heads))


def laplace_posterior_variance(ggn_diag: np.ndarray, prior_precision: float) -> np.ndarray:
    if prior_precision <= 0:
        raise ContractViolation(f"prior precision must be positive, got {prior_precision}")
    return 1.0 / (np.asarray(ggn_diag, dtype=np.float64) + prior_precision)


class LaplacePredictor(SecondOrderPredictor):
    name = "laplace"

    def __init__(self, model: MlpPredictor, ggn_diag: np.ndarray, prior_precision: float, samples: int):
        super().__init__()
        self.model = model
        self.ggn_diag = ggn_diag
        self.prior_precision = prior_precision
        self.default_samples = samples
        self.posterior_std = np.sqrt(laplace_posterior_variance(ggn_diag, prior_precision))
        self.inference_stream = RandomStream(model.seed).split("laplace-inference")

    def with_prior_precision(self, prior_precision: float) -> "LaplacePredictor":
        """Same MAP and curvature, different prior; the new predictor restarts the inference stream"""
        return LaplacePredictor(self.model, self.ggn_diag, prior_precision, self.default_samples)

    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        d = d or self.default_samples
        mlp, map_params = self.model.mlp, self.model.params
        means = np.empty((d, xs.size))
        variances = np.empty((d, xs.size))
        for j in range(d):
            eps = self.inference_stream.normal(size=len(map_params))
            out = mlp.evaluate(map_params.with_values(map_params.values + self.posterior_std * eps), xs)
            means[j] = out["mean"]
            variances[j] = np.exp(np.clip(out["log_variance"], LOG_VAR_MIN, LOG_VAR_MAX))
        return means, variances

    def save(self, path):
        self.model.params.save(Path(path) / "map.npz")
        np.save(Path(path) / "ggn_diag.npy", self.ggn_diag)


def fit_laplace(data: Dataset, mcfg: MlpConfig, tcfg: TrainConfig, cfg: LaplaceConfig = LaplaceConfig()) -> LaplacePredictor:
    try:
        model = train_mlp(data, mcfg, tcfg, prior_precision=cfg.prior_precision, label="laplace-map")
    except HarnessError as e:
        raise MethodError("laplace", str(e)) from e
    ggn = ggn_diagonal(model.mlp, model.params, data.xs, cfg.noise)
    if not np.all(np.isfinite(ggn)):
        raise MethodError("laplace", "non-finite curvature")
    logger.info(f"Laplace fitted: n={data.n} mean GGN diagonal {ggn.mean():.4g}")
    return LaplacePredictor(model, ggn, cfg.prior_precision, cfg.posterior_samples)
