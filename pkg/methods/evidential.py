"""
Disentangle - Deep Evidential Regression
MLP with four heads parameterising a Normal-Inverse-Gamma distribution over
(mu, sigma^2). Uncertainty comes from the NIG closed forms; the sampled route
draws sigma^2 ~ InvGamma(alpha, beta) and mu ~ N(gamma, sigma^2 / nu).
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import Tape, Tensor
from core.decompose import NigParams, der_decomposition_arrays
from core.dgp import Dataset
from core.errors import ContractViolation, HarnessError, MethodError
from core.nn import MLP, Batch, MlpConfig, TrainConfig, fit
from core.rng import RandomStream
from methods.base import GridUncertainty, SecondOrderPredictor

logger = logging.getLogger(__name__)

NIG_HEADS = ("gamma", "nu", "alpha", "beta")
# keeps nu, beta > 0 and alpha > 1 when softplus underflows
EVIDENCE_FLOOR = 1e-6
HALF_LOG_PI = 0.5 * math.log(math.pi)


@dataclass(frozen=True)
class DerConfig:
    reg_weight: float = 0.01
    samples: int = 500

    def __post_init__(self):
        if self.reg_weight < 0 or self.samples < 1:
            raise ContractViolation(f"invalid DER config {self}")


def nig_links(out: Dict[str, Tensor]) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    gamma = out["gamma"]
    nu = ad.softplus(out["nu"]) + EVIDENCE_FLOOR
    alpha = ad.softplus(out["alpha"]) + (1.0 + EVIDENCE_FLOOR)
    beta = ad.softplus(out["beta"]) + EVIDENCE_FLOOR
    return gamma, nu, alpha, beta


def nig_links_array(raw: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    softplus = lambda v: np.logaddexp(0.0, v)
    return (raw["gamma"], softplus(raw["nu"]) + EVIDENCE_FLOOR,
            softplus(raw["alpha"]) + 1.0 + EVIDENCE_FLOOR, softplus(raw["beta"]) + EVIDENCE_FLOOR)


def nig_nll_terms(y: Tensor, gamma: Tensor, nu: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Per-example negative log of the Student-t marginal of the NIG"""
    omega = 2.0 * beta * (1.0 + nu)
    resid = y - gamma
    return (HALF_LOG_PI - 0.5 * ad.log(nu) - alpha * ad.log(omega)
            + (alpha + 0.5) * ad.log(nu * ad.square(resid) + omega)
            + ad.lgamma(alpha) - ad.lgamma(alpha + 0.5))


def nig_regularizer_terms(y: Tensor, gamma: Tensor, nu: Tensor, alpha: Tensor) -> Tensor:
    return ad.abs_(y - gamma) * (2.0 * nu + alpha)


def der_batch_loss(mlp: MLP, cfg: DerConfig):
    def loss(tape: Tape, P: Dict[str, Tensor], batch: Batch) -> Tensor:
        gamma, nu, alpha, beta = nig_links(mlp.forward(tape, P, batch.xs))
        y = tape.constant(batch.ys.reshape(-1, 1))
        terms = nig_nll_terms(y, gamma, nu, alpha, beta)
        if cfg.reg_weight > 0:
            terms = terms + cfg.reg_weight * nig_regularizer_terms(y, gamma, nu, alpha)
        return ad.mean(terms)

    return loss


class EvidentialPredictor(SecondOrderPredictor):
    name = "der"

    def __init__(self, mlp: MLP, params, seed: int, samples: int):
        super().__init__()
        self.mlp = mlp
        self.params = params
        self.default_samples = samples
        self.inference_stream = RandomStream(seed).split("inference")

    def nig_arrays(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return nig_links_array(self.mlp.evaluate(self.params, np.atleast_1d(xs)))

    def predict_nig(self, x: float) -> NigParams:
        gamma, nu, alpha, beta = self.nig_arrays(np.array([x]))
        return NigParams(float(gamma[0]), float(nu[0]), float(alpha[0]), float(beta[0]))

    def uncertainty(self, xs: np.ndarray, d: Optional[int] = None) -> GridUncertainty:
        """Closed-form NIG decomposition; `d` is unused"""
        xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
        gamma, nu, alpha, beta = self.nig_arrays(xs)
        aleatoric, epistemic = der_decomposition_arrays(nu, alpha, beta)
        return GridUncertainty(xs, gamma, aleatoric, epistemic)

    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        d = d or self.default_samples
        gamma, nu, alpha, beta = self.nig_arrays(xs)
        variances = beta / self.inference_stream.gamma(np.broadcast_to(alpha, (d, xs.size)))
        means = gamma + np.sqrt(variances / nu) * self.inference_stream.normal(size=(d, xs.size))
        return means, variances

    def save(self, path):
        self.params.save(Path(path) / "weights.npz")


def fit_der(data: Dataset, mcfg: MlpConfig, tcfg: TrainConfig, cfg: DerConfig = DerConfig()) -> EvidentialPredictor:
    if data.n == 0:
        raise ContractViolation("cannot train on an empty dataset")
    mlp = MLP(replace(mcfg, heads=NIG_HEADS, dropout_rate=0.0))
    init = mlp.init_params(RandomStream(tcfg.seed).split("init"))
    try:
        result = fit(init, der_batch_loss(mlp, cfg), data, tcfg, label="der")
    except HarnessError as e:
        raise MethodError("der", str(e)) from e
    logger.info(f"DER trained: n={data.n} final loss {result.final_loss:.4f}")
    return EvidentialPredictor(mlp, result.params, tcfg.seed, cfg.samples)
