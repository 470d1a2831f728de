"""
Disentangle - Variational Inference
Mean-field Gaussian posterior over every MLP weight (Bayes by backprop):
sigma = softplus(rho), reparameterised weight draws, ELBO with a scaled KL term
that stays off during a burn-in period.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import ParameterVector, Tape, Tensor
from core.dgp import Dataset
from core.errors import ContractViolation, HarnessError, MethodError
from core.nn import (GAUSSIAN_HEADS, LOG_VAR_MAX, LOG_VAR_MIN, MLP, Batch, MlpConfig, TrainConfig,
                     clamped_log_variance, fit, gaussian_nll_terms)
from core.rng import RandomStream
from methods.base import SecondOrderPredictor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViConfig:
    burn_in: int = 200
    beta: float = 5.0
    train_mc: int = 10
    test_mc: int = 500
    prior_sigma: float = 1.0
    init_rho: float = -5.0

    def __post_init__(self):
        if self.burn_in < 0 or self.beta < 0 or self.train_mc < 1 or self.test_mc < 1 or self.prior_sigma <= 0:
            raise ContractViolation(f"invalid VI config {self}")


def kl_diag_gaussian(mu_q: np.ndarray, sigma_q: np.ndarray, mu_p: float = 0.0, sigma_p: float = 1.0) -> float:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over independent coordinates"""
    mu_q = np.asarray(mu_q, dtype=np.float64)
    sigma_q = np.asarray(sigma_q, dtype=np.float64)
    return float(np.sum(np.log(sigma_p / sigma_q) + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p ** 2) - 0.5))


def split_variational(params: ParameterVector) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    arrays = params.unflatten()
    mu = {name[3:]: arr for name, arr in arrays.items() if name.startswith("mu:")}
    rho = {name[4:]: arr for name, arr in arrays.items() if name.startswith("rho:")}
    return mu, rho


def init_variational(mlp: MLP, stream: RandomStream, init_rho: float) -> ParameterVector:
    means = mlp.init_params(stream).unflatten()
    arrays = {f"mu:{name}": arr for name, arr in means.items()}
    arrays.update({f"rho:{name}": np.full(arr.shape, init_rho) for name, arr in means.items()})
    return ParameterVector.from_arrays(arrays)


def _kl_tensor(tape: Tape, P: Dict[str, Tensor], sigmas: Dict[str, Tensor], prior_sigma: float) -> Tensor:
    # sum log(sigma_p / sigma_q) + (sigma_q^2 + mu^2) / (2 sigma_p^2) - 1/2
    count = 0
    total = None
    scale = 0.5 / prior_sigma ** 2
    for name, sigma in sigmas.items():
        mu = P[f"mu:{name}"]
        count += mu.data.size
        term = ad.sum_(scale * (ad.square(sigma) + ad.square(mu)) - ad.log(sigma))
        total = term if total is None else total + term
    return total + count * (math.log(prior_sigma) - 0.5)


def vi_batch_loss(mlp: MLP, cfg: ViConfig):
    """(MC-averaged summed NLL + KL weight * KL) / batch size"""

    def loss(tape: Tape, P: Dict[str, Tensor], batch: Batch) -> Tensor:
        names = [name[3:] for name in P if name.startswith("mu:")]
        sigmas = {name: ad.softplus(P[f"rho:{name}"]) for name in names}
        y = tape.constant(batch.ys.reshape(-1, 1))
        nll = None
        for _ in range(cfg.train_mc):
            weights = {name: P[f"mu:{name}"] + sigmas[name] * tape.constant(batch.stream.normal(size=sigmas[name].shape))
                       for name in names}
            out = mlp.forward(tape, weights, batch.xs)
            term = ad.sum_(gaussian_nll_terms(out["mean"], clamped_log_variance(out["log_variance"]), y))
            nll = term if nll is None else nll + term
        value = nll * (1.0 / cfg.train_mc)
        kl_weight = 0.0 if batch.epoch <= cfg.burn_in else cfg.beta / batch.num_batches
        if kl_weight > 0:
            value = value + kl_weight * _kl_tensor(tape, P, sigmas, cfg.prior_sigma)
        return value * (1.0 / batch.xs.size)

    return loss


class VariationalPredictor(SecondOrderPredictor):
    name = "vi"

    def __init__(self, mlp: MLP, params: ParameterVector, seed: int, samples: int):
        super().__init__()
        self.mlp = mlp
        self.params = params
        self.default_samples = samples
        self.inference_stream = RandomStream(seed).split("inference")
        mu, rho = split_variational(params)
        self.mean_params = ParameterVector.from_arrays(mu)
        self.sigma = self.mean_params.flatten_like({k: np.logaddexp(0.0, v) for k, v in rho.items()})

    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        d = d or self.default_samples
        means = np.empty((d, xs.size))
        variances = np.empty((d, xs.size))
        for j in range(d):
            eps = self.inference_stream.normal(size=self.sigma.size)
            out = self.mlp.evaluate(self.mean_params.with_values(self.mean_params.values + self.sigma * eps), xs)
            means[j] = out["mean"]
            variances[j] = np.exp(np.clip(out["log_variance"], LOG_VAR_MIN, LOG_VAR_MAX))
        return means, variances

    def save(self, path):
        self.params.save(Path(path) / "variational.npz")


def fit_vi(data: Dataset, mcfg: MlpConfig, tcfg: TrainConfig, cfg: ViConfig = ViConfig()) -> VariationalPredictor:
    if tuple(mcfg.heads) != GAUSSIAN_HEADS:
        raise ContractViolation(f"VI needs heads {GAUSSIAN_HEADS}")
    mlp = MLP(mcfg)
    init = init_variational(mlp, RandomStream(tcfg.seed).split("init"), cfg.init_rho)
    try:
        result = fit(init, vi_batch_loss(mlp, cfg), data, tcfg, label="vi")
    except HarnessError as e:
        raise MethodError("vi", str(e)) from e
    logger.info(f"VI trained: n={data.n} final loss {result.final_loss:.4f}")
    return VariationalPredictor(mlp, result.params, tcfg.seed, cfg.test_mc)
