"""
Disentangle - Heteroscedastic Gaussian Process
Two independent latent GPs, f for the mean and g for the log noise variance
(y ~ N(f(x), exp(g(x)))), fitted by sparse variational inference over shared
inducing inputs in the whitened parameterisation.

Mean-process RBF hyperparameters come from an exact homoscedastic GP fit by
marginal likelihood. Noise-process hyperparameters start from an exact GP fit
to the log squared residuals of that mean fit; the noise signal variance is then
learned with the variational parameters through a log-scale s_g (in the whitened
form g = exp(s_g / 2) A v, so the KL term does not depend on it). The ELBO's
expected log-likelihood is closed form:
E[log N(y | f, e^g)] = -log(2 pi)/2 - mu_g/2 - ((y - mu_f)^2 + v_f) exp(-mu_g + v_g/2) / 2
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg, optimize

from core import autodiff as ad
from core.autodiff import ParameterVector, Tape, Tensor
from core.dgp import Dataset
from core.errors import ContractViolation, HarnessError, MethodError
from core.nn import HALF_LOG_2PI, Batch, TrainConfig, fit
from core.rng import RandomStream
from methods.base import SecondOrderPredictor

logger = logging.getLogger(__name__)

KERNELS = ("rbf",)
LOG_BOUNDS = [(math.log(1e-3), math.log(10.0)),   # lengthscale
              (math.log(1e-3), math.log(1e2)),    # signal variance
              (math.log(1e-6), math.log(10.0))]   # noise variance

# Added inside the log of squared residuals so an exact fit point stays finite
LOG_RESIDUAL_FLOOR = 1e-8


@dataclass(frozen=True)
class GpConfig:
    kernel: str = "rbf"
    inducing: int = 256
    samples: int = 500
    jitter: float = 1e-6
    max_jitter: float = 1e-4
    noise_lengthscale: float = 0.2
    noise_variance: float = 1.0
    learn_noise_kernel: bool = True

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ContractViolation(f"unsupported kernel '{self.kernel}'")
        if self.inducing < 1 or self.samples < 1:
            raise ContractViolation(f"invalid GP config {self}")
        if not 0 < self.jitter <= self.max_jitter:
            raise ContractViolation(f"need 0 < jitter <= max_jitter, got {self.jitter}, {self.max_jitter}")
        if self.noise_lengthscale <= 0 or self.noise_variance <= 0:
            raise ContractViolation("noise kernel hyperparameters must be positive")


@dataclass(frozen=True)
class RbfKernel:
    lengthscale: float
    variance: float

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.variance > 0):
            raise ContractViolation(f"RBF hyperparameters must be positive, got {self}")

    def __call__(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        return rbf_kernel(x1, x2, self.lengthscale, self.variance)


def rbf_kernel(x1: np.ndarray, x2: np.ndarray, lengthscale: float, variance: float) -> np.ndarray:
    diff = np.asarray(x1, dtype=np.float64).reshape(-1, 1) - np.asarray(x2, dtype=np.float64).reshape(1, -1)
    return variance * np.exp(-0.5 * (diff / lengthscale) ** 2)


def cholesky_with_jitter(K: np.ndarray, jitter: float, max_jitter: float,
                         label: str = "hetero_gp") -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of K + jitter * I, raising jitter tenfold until max_jitter"""
    steps = int(round(math.log10(max_jitter / jitter))) + 1
    eye = np.eye(K.shape[0])
    for k in range(max(steps, 1)):
        current = jitter * 10.0 ** k
        try:
            return linalg.cholesky(K + current * eye, lower=True), current
        except linalg.LinAlgError:
            logger.debug(f"{label}: Cholesky failed with jitter {current:.0e}")
    raise MethodError(label, f"covariance not positive definite with jitter up to {max_jitter:.0e}")


# -------------------------
# Exact GP
# -------------------------

class ExactGP:
    """Homoscedastic GP regression with exact posterior; used to set the mean-process kernel"""

    def __init__(self, kernel: RbfKernel, noise: float, jitter: float = 1e-10, max_jitter: float = 1e-4):
        if noise < 0:
            raise ContractViolation(f"noise variance must be nonnegative, got {noise}")
        self.kernel = kernel
        self.noise = noise
        self.jitter = jitter
        self.max_jitter = max_jitter
        self.xs: Optional[np.ndarray] = None
        self._chol: Optional[np.ndarray] = None
        self._alpha: Optional[np.ndarray] = None
        self._ys: Optional[np.ndarray] = None

    def fit(self, xs: np.ndarray, ys: np.ndarray) -> "ExactGP":
        self.xs = np.asarray(xs, dtype=np.float64).reshape(-1)
        ys = np.asarray(ys, dtype=np.float64).reshape(-1)
        K = self.kernel(self.xs, self.xs) + self.noise * np.eye(self.xs.size)
        self._chol, _ = cholesky_with_jitter(K, self.jitter, self.max_jitter, label="exact_gp")
        self._alpha = linalg.cho_solve((self._chol, True), ys)
        self._ys = ys
        return self

    def predict(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean and variance"""
        if self._chol is None:
            raise ContractViolation("ExactGP.predict before fit")
        K_star = self.kernel(self.xs, xs)
        mean = K_star.T @ self._alpha
        v = linalg.solve_triangular(self._chol, K_star, lower=True)
        var = self.kernel.variance - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        n = self._ys.size
        return float(-0.5 * self._ys @ self._alpha - np.sum(np.log(np.diag(self._chol))) - 0.5 * n * math.log(2 * math.pi))

    @classmethod
    def optimise(cls, xs: np.ndarray, ys: np.ndarray, init: Tuple[float, float, float] = (0.1, 1.0, 0.1)) -> "ExactGP":
        """Maximise the marginal likelihood over (lengthscale, signal variance, noise variance)"""

        def objective(theta: np.ndarray) -> float:
            ls, var, noise = np.exp(theta)
            try:
                return -cls(RbfKernel(ls, var), noise).fit(xs, ys).log_marginal_likelihood()
            except MethodError:
                return 1e10

        start = np.log(np.clip(init, [math.exp(b[0]) for b in LOG_BOUNDS], [math.exp(b[1]) for b in LOG_BOUNDS]))
        result = optimize.minimize(objective, start, method="L-BFGS-B", bounds=LOG_BOUNDS)
        ls, var, noise = np.exp(result.x)
        logger.debug(f"Exact GP hyperparameters: lengthscale={ls:.4g} variance={var:.4g} noise={noise:.4g}")
        return cls(RbfKernel(ls, var), noise).fit(xs, ys)


# -------------------------
# Sparse variational heteroscedastic GP
# -------------------------

@dataclass
class GpPosterior:
    """Kernels, inducing inputs, whitened variational moments and the inducing-covariance factors"""

    mean_kernel: RbfKernel
    noise_kernel: RbfKernel
    inducing: np.ndarray
    params: ParameterVector
    chol_f: np.ndarray
    chol_g: np.ndarray

    @property
    def noise_scale(self) -> float:
        return math.exp(float(self.params.unflatten()["s_g"][0]))

    def processes(self) -> Tuple[Tuple[str, RbfKernel, np.ndarray], ...]:
        """(tag, kernel, lower factor of K(Z, Z)) per latent process, with the learned noise scale applied"""
        scale = self.noise_scale
        noise = RbfKernel(self.noise_kernel.lengthscale, self.noise_kernel.variance * scale)
        return ("f", self.mean_kernel, self.chol_f), ("g", noise, self.chol_g * math.sqrt(scale))

    def moments(self, xs: np.ndarray) -> Dict[str, np.ndarray]:
        """Projections and marginal moments of q(f(x)) and q(g(x))"""
        P = self.params.unflatten()
        out: Dict[str, np.ndarray] = {}
        for tag, kernel, chol in self.processes():
            A = linalg.solve_triangular(chol, kernel(self.inducing, xs), lower=True).T    # (n, M)
            S = whitened_factor_array(P[f"L_{tag}"], P[f"D_{tag}"])
            resid = np.maximum(kernel.variance - np.sum(A * A, axis=1), 0.0)
            mean = A @ P[f"m_{tag}"][:, 0]
            if tag == "g":
                mean = mean + P["c_g"][0]
            out[f"A_{tag}"] = A
            out[f"S_{tag}"] = S
            out[f"resid_{tag}"] = resid
            out[f"mean_{tag}"] = mean
            out[f"var_{tag}"] = resid + np.sum((A @ S) ** 2, axis=1)
        return out

    def residual_factor(self, tag: str, xs: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Square-root factor of the joint conditional covariance K(x, x) - A A^T of a process given its inducing values"""
        kernel = dict((t, k) for t, k, _ in self.processes())[tag]
        w, V = linalg.eigh(kernel(xs, xs) - A @ A.T)
        return V * np.sqrt(np.maximum(w, 0.0))


def whitened_factor_array(lower: np.ndarray, log_diag: np.ndarray) -> np.ndarray:
    return np.tril(lower, -1) + np.diag(np.exp(log_diag))


def _whitened_factor(L: Tensor, D: Tensor, mask: np.ndarray, eye: np.ndarray) -> Tensor:
    return L * mask + ad.exp(D) * eye


def _whitened_kl(m: Tensor, S: Tensor, D: Tensor) -> Tensor:
    """KL(N(m, S S^T) || N(0, I)) with log|S| = sum(D)"""
    M = m.data.size
    return 0.5 * (ad.sum_(ad.square(S)) + ad.sum_(ad.square(m)) - 2.0 * ad.sum_(D)) - 0.5 * M


def init_variational_gp(M: int, ys: np.ndarray) -> ParameterVector:
    log_var = math.log(max(float(np.var(ys)), 1e-6))
    return ParameterVector.from_arrays({
        "m_f": np.zeros((M, 1)), "L_f": np.zeros((M, M)), "D_f": np.zeros(M),
        "m_g": np.zeros((M, 1)), "L_g": np.zeros((M, M)), "D_g": np.zeros(M),
        "c_g": np.array([log_var]), "s_g": np.zeros(1),
    })


def svgp_batch_loss(mean_kernel: RbfKernel, noise_kernel: RbfKernel, inducing: np.ndarray,
                    chol_f: np.ndarray, chol_g: np.ndarray, n_total: int, learn_noise_scale: bool = True):
    """Negative ELBO per training point, minibatch estimate of the likelihood term"""
    M = inducing.size
    mask = np.tril(np.ones((M, M)), -1)
    eye = np.eye(M)

    def loss(tape: Tape, P: Dict[str, Tensor], batch: Batch) -> Tensor:
        y = tape.constant(batch.ys.reshape(-1, 1))
        moments = {}
        kl = None
        for tag, kernel, chol in (("f", mean_kernel, chol_f), ("g", noise_kernel, chol_g)):
            A = linalg.solve_triangular(chol, kernel(inducing, batch.xs), lower=True).T
            resid = np.maximum(kernel.variance - np.sum(A * A, axis=1), 0.0).reshape(-1, 1)
            S = _whitened_factor(P[f"L_{tag}"], P[f"D_{tag}"], mask, eye)
            A_t = tape.constant(A)
            mean = A_t @ P[f"m_{tag}"]
            var = ad.sum_(ad.square(A_t @ S), axis=1) + resid
            moments[tag] = (mean, var)
            term = _whitened_kl(P[f"m_{tag}"], S, P[f"D_{tag}"])
            kl = term if kl is None else kl + term
        mean_f, var_f = moments["f"]
        mean_g, var_g = moments["g"]
        s_g = P["s_g"] if learn_noise_scale else tape.constant(np.zeros(1))
        mean_g = mean_g * ad.exp(0.5 * s_g) + P["c_g"]
        var_g = var_g * ad.exp(s_g)
        expected = (-HALF_LOG_2PI - 0.5 * mean_g
                    - 0.5 * ((ad.square(y - mean_f) + var_f) * ad.exp(0.5 * var_g - mean_g)))
        return -ad.mean(expected) + kl * (1.0 / n_total)

    return loss


class HeteroGpPredictor(SecondOrderPredictor):
    name = "hetero_gp"

    def __init__(self, posterior: GpPosterior, seed: int, samples: int):
        super().__init__()
        self.posterior = posterior
        self.default_samples = samples
        self.inference_stream = RandomStream(seed).split("gp-inference")

    def members(self, xs: np.ndarray, d: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Each member is one joint draw of f and g over the whole grid"""
        d = d or self.default_samples
        mo = self.posterior.moments(xs)
        P = self.posterior.params.unflatten()
        draws = {}
        for tag in ("f", "g"):
            M = mo[f"S_{tag}"].shape[0]
            v = P[f"m_{tag}"][:, 0] + self.inference_stream.normal(size=(d, M)) @ mo[f"S_{tag}"].T
            factor = self.posterior.residual_factor(tag, xs, mo[f"A_{tag}"])
            residual = self.inference_stream.normal(size=(d, xs.size)) @ factor.T
            draws[tag] = v @ mo[f"A_{tag}"].T + residual
        means = draws["f"]
        variances = np.exp(np.clip(draws["g"] + P["c_g"][0], -50.0, 50.0))
        return means, variances

    def save(self, path):
        self.posterior.params.save(Path(path) / "variational.npz")
        np.save(Path(path) / "inducing.npy", self.posterior.inducing)


def inducing_inputs(xs: np.ndarray, count: int) -> np.ndarray:
    """min(count, N) inducing inputs at evenly spaced quantiles of the training covariates"""
    M = min(count, xs.size)
    return np.quantile(xs, np.linspace(0.0, 1.0, M))


def noise_kernel_from_residuals(exact: ExactGP, xs: np.ndarray, ys: np.ndarray, init: Tuple[float, float]) -> RbfKernel:
    """RBF hyperparameters of an exact GP fitted to the centred log squared residuals of the mean fit"""
    mean, _ = exact.predict(xs)
    z = np.log((ys - mean) ** 2 + LOG_RESIDUAL_FLOOR)
    fitted = ExactGP.optimise(xs, z - z.mean(), init=(init[0], init[1], 1.0))
    return fitted.kernel


def fit_hetero_gp(data: Dataset, tcfg: TrainConfig, cfg: GpConfig = GpConfig()) -> HeteroGpPredictor:
    if data.n == 0:
        raise ContractViolation("cannot fit a GP to an empty dataset")
    exact = ExactGP.optimise(data.xs, data.ys, init=(0.1, max(float(np.var(data.ys)), 1e-3), 0.1))
    mean_kernel = exact.kernel
    if cfg.learn_noise_kernel:
        noise_kernel = noise_kernel_from_residuals(exact, data.xs, data.ys, (cfg.noise_lengthscale, cfg.noise_variance))
    else:
        noise_kernel = RbfKernel(cfg.noise_lengthscale, cfg.noise_variance)
    Z = inducing_inputs(data.xs, cfg.inducing)
    chol_f, jit_f = cholesky_with_jitter(mean_kernel(Z, Z), cfg.jitter, cfg.max_jitter)
    chol_g, jit_g = cholesky_with_jitter(noise_kernel(Z, Z), cfg.jitter, cfg.max_jitter)
    logger.info(f"Hetero GP: M={Z.size} mean lengthscale {mean_kernel.lengthscale:.4g} "
                f"noise lengthscale {noise_kernel.lengthscale:.4g} jitter {max(jit_f, jit_g):.0e}")

    loss = svgp_batch_loss(mean_kernel, noise_kernel, Z, chol_f, chol_g, data.n, cfg.learn_noise_kernel)
    try:
        result = fit(init_variational_gp(Z.size, data.ys), loss, data, tcfg, label="hetero_gp")
    except HarnessError as e:
        raise MethodError("hetero_gp", str(e)) from e
    posterior = GpPosterior(mean_kernel, noise_kernel, Z, result.params, chol_f, chol_g)
    logger.debug(f"Hetero GP: learned noise scale {posterior.noise_scale:.4g}")
    return HeteroGpPredictor(posterior, tcfg.seed, cfg.samples)
