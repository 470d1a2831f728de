"""
Disentangle - Methods Module
The eight second-order uncertainty methods and the registry that builds them
from an experiment configuration
"""

import logging
from typing import Callable, Dict, Optional

from config import ExperimentConfig, MethodSettings
from core.decompose import NigParams, SecondOrderSample
from core.dgp import Dataset
from core.errors import ContractViolation
from core.nn import MlpConfig, TrainConfig
from core.rng import RandomStream

from .base import GridUncertainty, SecondOrderPredictor
from .ensembles import EnsemblePredictor, bootstrap_indices, fit_bootstrap_ensemble, fit_deep_ensemble
from .evidential import DerConfig, EvidentialPredictor, fit_der
from .hetero_gp import ExactGP, GpConfig, HeteroGpPredictor, RbfKernel, fit_hetero_gp, rbf_kernel
from .hmc import HmcConfig, HmcPredictor, hmc_chain, leapfrog, metropolis_accept, fit_hmc
from .laplace import LaplaceConfig, LaplacePredictor, fit_laplace, laplace_posterior_variance
from .mc_dropout import McDropoutPredictor, fit_mc_dropout
from .variational import VariationalPredictor, ViConfig, fit_vi, kl_diag_gaussian

logger = logging.getLogger(__name__)


def mlp_config(cfg: ExperimentConfig) -> MlpConfig:
    return MlpConfig(hidden_layers=cfg.mlp["hidden_layers"], hidden_width=cfg.mlp["hidden_width"],
                     activation=cfg.mlp["activation"])


def train_config(cfg: ExperimentConfig, settings: MethodSettings, n: int, seed: int,
                 epochs_key: str = "epochs") -> TrainConfig:
    return TrainConfig(
        learning_rate=float(settings["learning_rate"]),
        epochs=int(settings.per_size(epochs_key, n)),
        batch_size=int(settings.per_size("batch_size", n, fallback=cfg.batch_size_for(n))),
        seed=seed,
    )


def member_seeds(seed: int, d: int):
    stream = RandomStream(seed).split("members")
    return [stream.split("member", i).seed for i in range(d)]


def _deep_ensemble(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    d = int(s["ensemble_size"])
    return fit_deep_ensemble(data, d, member_seeds(seed, d), mlp_config(cfg), train_config(cfg, s, data.n, seed))


def _bootstrap_ensemble(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    d = int(s["ensemble_size"])
    return fit_bootstrap_ensemble(data, d, member_seeds(seed, d), mlp_config(cfg),
                                  train_config(cfg, s, data.n, seed), fraction=float(s["fraction"]))


def _mc_dropout(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    return fit_mc_dropout(data, float(s["rate"]), mlp_config(cfg), train_config(cfg, s, data.n, seed),
                          samples=int(s["samples"]))


def _vi(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    vi_cfg = ViConfig(burn_in=int(s["burn_in"]), beta=float(s["beta"]), train_mc=int(s["train_mc"]),
                      test_mc=int(s["test_mc"]), prior_sigma=float(s["prior_sigma"]), init_rho=float(s["init_rho"]))
    return fit_vi(data, mlp_config(cfg), train_config(cfg, s, data.n, seed), vi_cfg)


def _laplace(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    la_cfg = LaplaceConfig(prior_precision=float(s["prior_precision"]), noise=float(s["noise"]),
                           posterior_samples=int(s["posterior_samples"]))
    return fit_laplace(data, mlp_config(cfg), train_config(cfg, s, data.n, seed), la_cfg)


def _hmc(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    hmc_cfg = HmcConfig(n_samples=int(s["n_samples"]), step_size=float(s["step_size"]), burn=int(s["burn"]),
                        leapfrog_steps=int(s["leapfrog_steps"]), tau=float(s["tau"]),
                        inference_samples=int(s["inference_samples"]), inference_burn=int(s["inference_burn"]))
    return fit_hmc(data, mlp_config(cfg), train_config(cfg, s, data.n, seed, epochs_key="pretrain_epochs"), hmc_cfg)


def _der(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    return fit_der(data, mlp_config(cfg), train_config(cfg, s, data.n, seed),
                   DerConfig(reg_weight=float(s["lambda"]), samples=int(s["samples"])))


def _hetero_gp(data: Dataset, cfg: ExperimentConfig, s: MethodSettings, seed: int):
    gp_cfg = GpConfig(kernel=s["kernel"], inducing=int(s["inducing"]), samples=int(s["samples"]),
                      jitter=float(s["jitter"]), max_jitter=float(s["max_jitter"]),
                      noise_lengthscale=float(s["noise_lengthscale"]), noise_variance=float(s["noise_variance"]),
                      learn_noise_kernel=bool(s["learn_noise_kernel"]))
    return fit_hetero_gp(data, train_config(cfg, s, data.n, seed), gp_cfg)


Builder = Callable[[Dataset, ExperimentConfig, MethodSettings, int], SecondOrderPredictor]

METHODS: Dict[str, Builder] = {
    "deep_ensemble": _deep_ensemble,
    "bootstrap_ensemble": _bootstrap_ensemble,
    "mc_dropout": _mc_dropout,
    "vi": _vi,
    "laplace": _laplace,
    "hmc": _hmc,
    "der": _der,
    "hetero_gp": _hetero_gp,
}


def fit_method(name: str, data: Dataset, cfg: ExperimentConfig, seed: int) -> SecondOrderPredictor:
    """Fit one configured method on one dataset with one procedural seed"""
    if name not in METHODS:
        raise ContractViolation(f"unknown method '{name}'")
    logger.debug(f"Fitting {name} on n={data.n} (dataset seed {data.seed}, seed {seed})")
    return METHODS[name](data, cfg, cfg.settings(name), seed)


def sample_thetas(predictor: SecondOrderPredictor, x: float, d: Optional[int] = None) -> SecondOrderSample:
    return predictor.sample_thetas(x, d)


__all__ = [
    "METHODS", "fit_method", "sample_thetas", "mlp_config", "train_config", "member_seeds",
    "SecondOrderPredictor", "SecondOrderSample", "NigParams", "GridUncertainty",
    "EnsemblePredictor", "McDropoutPredictor", "VariationalPredictor", "LaplacePredictor",
    "HmcPredictor", "EvidentialPredictor", "HeteroGpPredictor",
    "fit_deep_ensemble", "fit_bootstrap_ensemble", "fit_mc_dropout", "fit_vi", "fit_laplace",
    "fit_hmc", "fit_der", "fit_hetero_gp",
    "ViConfig", "LaplaceConfig", "HmcConfig", "DerConfig", "GpConfig",
    "bootstrap_indices", "kl_diag_gaussian", "laplace_posterior_variance", "leapfrog", "hmc_chain",
    "metropolis_accept", "ExactGP", "RbfKernel", "rbf_kernel",
]
