"""
Disentangle - Hamiltonian Monte Carlo
Leapfrog HMC with unit mass over the flat weight vector, started from a
pretrained posterior mode. The chain machinery is generic over any
differentiable potential.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import ParameterVector, Tape, Tensor
from core.dgp import Dataset
from core.errors import ContractViolation, HarnessError, MethodError, NumericError
from core.nn import (LOG_VAR_MAX, LOG_VAR_MIN, MLP, MlpConfig, TrainConfig, clamped_log_variance,
                     gaussian_nll_terms, l2_penalty, train_mlp)
from core.rng import RandomStream
from methods.base import SecondOrderPredictor

logger = logging.getLogger(__name__)

MIN_ACCEPT_RATE = 0.01

Potential = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class HmcConfig:
    n_samples: int = 200
    step_size: float = 0.00015
    burn: int = 50
    leapfrog_steps: int = 10
    tau: float = 1.0
    inference_samples: int = 1000
    inference_burn: int = 50

    def __post_init__(self):
        if self.n_samples <= self.burn or self.burn < 0:
            raise ContractViolation(f"chain of {self.n_samples} with burn-in {self.burn} keeps nothing")
        if self.step_size <= 0 or self.leapfrog_steps < 1 or self.tau <= 0:
            raise ContractViolation(f"invalid HMC config {self}")
        if self.inference_samples <= self.inference_burn or self.inference_burn < 0:
            raise ContractViolation(f"invalid HMC inference draw {self.inference_samples}/{self.inference_burn}")


@dataclass
class HmcChain:
    samples: np.ndarray   # (retained, dim)
    accepted: int
    proposals: int

    @property
    def accept_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else 0.0


def metropolis_accept(delta_h: float, u: float) -> bool:
    """Accept with probability min(1, exp(-delta_h)); u is Uniform[0, 1)"""
    if math.isnan(delta_h):
        return False
    return u < math.exp(min(0.0, -delta_h))


def leapfrog(q: np.ndarray, p: np.ndarray, grad: np.ndarray, potential: Potential,
             step_size: float, n_steps: int) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Half momentum step, n_steps full position steps, closing half step; returns (q, p, U(q), grad U(q))"""
    p = p - 0.5 * step_size * grad
    value = math.nan
    for step in range(n_steps):
        q = q + step_size * p
        value, grad = potential(q)
        if step < n_steps - 1:
            p = p - step_size * grad
    p = p - 0.5 * step_size * grad
    return q, p, value, grad


def hmc_chain(potential: Potential, init: np.ndarray, n_samples: int, step_size: float,
              leapfrog_steps: int, stream: RandomStream, burn: int = 0, label: str = "hmc") -> HmcChain:
    q = np.array(init, dtype=np.float64)
    value, grad = potential(q)
    kept = []
    accepted = 0
    for it in range(n_samples):
        p0 = stream.normal(size=q.size)
        try:
            q_new, p_new, value_new, grad_new = leapfrog(q, p0, grad, potential, step_size, leapfrog_steps)
            delta_h = (value_new + 0.5 * p_new @ p_new) - (value + 0.5 * p0 @ p0)
        except NumericError:
            delta_h = math.inf
        if not math.isfinite(delta_h):
            delta_h = math.inf
        if metropolis_accept(delta_h, stream.uniform()):
            q, value, grad = q_new, value_new, grad_new
            accepted += 1
        if it >= burn:
            kept.append(q.copy())
        if (it + 1) % 50 == 0:
            logger.debug(f"{label}: {it + 1}/{n_samples} accept rate {accepted / (it + 1):.3f}")
    return HmcChain(np.array(kept), accepted, n_samples)


def network_potential(mlp: MLP, template: ParameterVector, data: Dataset, tau: float) -> Potential:
    """U(phi) = sum_n NLL_n(phi) + tau / 2 * |phi|^2"""
    y = data.ys.reshape(-1, 1)

    def loss(tape: Tape, P: Dict[str, Tensor]) -> Tensor:
        out = mlp.forward(tape, P, data.xs)
        nll = ad.sum_(gaussian_nll_terms(out["mean"], clamped_log_variance(out["log_variance"]), tape.constant(y)))
        return nll + (0.5 * tau) * l2_penalty(P)

    def potential(q: np.ndarray) -> Tuple[float, np.ndarray]:
        return ad.grad_at(template.with_values(q), loss)

    return potential


class HmcPredictor(SecondOrderPredictor):
    name = "hmc"

    def __init__(self, mlp: MLP, template: ParameterVector, chain: HmcChain, seed: int, cfg: HmcConfig):
        super().__init__()
        self.mlp = mlp
        self.template = template
        self.chain = chain
        self.cfg = cfg
        self.default_samples = cfg.inference_samples - cfg.inference_burn
        self.inference_stream = RandomStream(seed).split("hmc-inference")
        if chain.accept_rate < MIN_ACCEPT_RATE:
            self.warn(f"acceptance rate {chain.accept_rate:.4f} below {MIN_ACCEPT_RATE}")

    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        d = d or self.default_samples
        picks = self.inference_stream.integers(0, len(self.chain.samples), d + self.cfg.inference_burn)
        picks = picks[self.cfg.inference_burn:]
        means = np.empty((d, xs.size))
        variances = np.empty((d, xs.size))
        for j, k in enumerate(picks):
            out = self.mlp.evaluate(self.template.with_values(self.chain.samples[k]), xs)
            means[j] = out["mean"]
            variances[j] = np.exp(np.clip(out["log_variance"], LOG_VAR_MIN, LOG_VAR_MAX))
        return means, variances

    def save(self, path):
        np.save(Path(path) / "chain.npy", self.chain.samples)


def fit_hmc(data: Dataset, mcfg: MlpConfig, tcfg: TrainConfig, cfg: HmcConfig = HmcConfig()) -> HmcPredictor:
    """`tcfg` drives the pretraining run; the chain starts from its weights"""
    try:
        mode = train_mlp(data, mcfg, tcfg, prior_precision=cfg.tau, label="hmc-pretrain")
    except HarnessError as e:
        raise MethodError("hmc", str(e)) from e
    potential = network_potential(mode.mlp, mode.params, data, cfg.tau)
    chain_stream = RandomStream(tcfg.seed).split("hmc-chain")
    try:
        chain = hmc_chain(potential, mode.params.values, cfg.n_samples, cfg.step_size,
                          cfg.leapfrog_steps, chain_stream, burn=cfg.burn)
    except NumericError as e:
        raise MethodError("hmc", f"potential not finite at the chain start: {e}") from e
    logger.info(f"HMC chain: {len(chain.samples)} retained samples, accept rate {chain.accept_rate:.3f}")
    return HmcPredictor(mode.mlp, mode.params, chain, tcfg.seed, cfg)
