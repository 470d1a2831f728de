"""
Disentangle - Heteroscedastic MLP
Mean / log-variance MLP, Adam, and the minibatch training loop shared by the
network-based methods
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import VARIANCE_CEILING, VARIANCE_FLOOR
from core import autodiff as ad
from core.autodiff import ParameterVector, Tape, Tensor
from core.dgp import Dataset
from core.errors import ContractViolation, NumericError, TrainingError
from core.rng import RandomStream

logger = logging.getLogger(__name__)

LOG_VAR_MIN = math.log(VARIANCE_FLOOR)
LOG_VAR_MAX = math.log(VARIANCE_CEILING)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ad.relu,
    "tanh": ad.tanh,
}

GAUSSIAN_HEADS = ("mean", "log_variance")


@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: int = 4
    hidden_width: int = 100
    activation: str = "relu"
    heads: Tuple[str, ...] = GAUSSIAN_HEADS
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ContractViolation(f"MLP needs at least one hidden unit and layer, got {self.hidden_layers}x{self.hidden_width}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation '{self.activation}'")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation(f"invalid training config {self}")


@dataclass(frozen=True)
class FirstOrderPrediction:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.variance) and self.variance > 0):
            raise ContractViolation(f"variance must be positive and finite, got {self.variance}")


def gaussian_nll(pred: FirstOrderPrediction, y: float) -> float:
    if pred.variance <= 0:
        raise ContractViolation(f"variance must be positive, got {pred.variance}")
    return 0.5 * (math.log(2.0 * math.pi * pred.variance) + (y - pred.mean) ** 2 / pred.variance)


def gaussian_nll_terms(mean: Tensor, log_variance: Tensor, y: Tensor) -> Tensor:
    """Per-example Gaussian NLL from mean and (already clamped) log-variance heads"""
    resid = y - mean
    return HALF_LOG_2PI + 0.5 * log_variance + 0.5 * (ad.square(resid) * ad.exp(-log_variance))


class MLP:
    """Fully connected network with one linear readout per named head"""

    def __init__(self, config: MlpConfig):
        self.config = config
        self.act = ACTIVATIONS[config.activation]

    def init_params(self, stream: RandomStream) -> ParameterVector:
        # fan-in scaled uniform (He), zero biases
        cfg = self.config
        arrays: Dict[str, np.ndarray] = {}
        fan_in = 1
        for layer in range(cfg.hidden_layers):
            limit = math.sqrt(6.0 / fan_in)
            arrays[f"W{layer}"] = stream.uniform(-limit, limit, (fan_in, cfg.hidden_width))
            arrays[f"b{layer}"] = np.zeros(cfg.hidden_width)
            fan_in = cfg.hidden_width
        limit = math.sqrt(6.0 / fan_in)
        for head in cfg.heads:
            arrays[f"W_{head}"] = stream.uniform(-limit, limit, (fan_in, 1))
            arrays[f"b_{head}"] = np.zeros(1)
        return ParameterVector.from_arrays(arrays)

    def dropout_masks(self, stream: RandomStream, batch: int, shared: bool = False) -> List[np.ndarray]:
        """Inverted dropout masks per hidden layer; `shared` draws one (width,) row broadcast over the batch"""
        keep = 1.0 - self.config.dropout_rate
        shape = (self.config.hidden_width,) if shared else (batch, self.config.hidden_width)
        return [stream.bernoulli(keep, shape) / keep for _ in range(self.config.hidden_layers)]

    def forward(self, tape: Tape, P: Dict[str, Tensor], xs: np.ndarray,
                masks: Optional[List[np.ndarray]] = None) -> Dict[str, Tensor]:
        h = tape.constant(np.asarray(xs, dtype=np.float64).reshape(-1, 1))
        for layer in range(self.config.hidden_layers):
            h = self.act(h @ P[f"W{layer}"] + P[f"b{layer}"])
            if masks is not None:
                h = h * tape.constant(masks[layer])
        return {head: h @ P[f"W_{head}"] + P[f"b_{head}"] for head in self.config.heads}

    def evaluate(self, params: ParameterVector, xs: np.ndarray,
                 masks: Optional[List[np.ndarray]] = None) -> Dict[str, np.ndarray]:
        tape = Tape()
        out = self.forward(tape, tape.bind(params), xs, masks)
        return {head: t.data[:, 0] for head, t in out.items()}


def clamped_log_variance(raw: Tensor) -> Tensor:
    return ad.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)


def l2_penalty(P: Dict[str, Tensor]) -> Tensor:
    total = None
    for tensor in P.values():
        term = ad.sum_(ad.square(tensor))
        total = term if total is None else total + term
    return total


# -------------------------
# Optimisation
# -------------------------

class Adam:
    """Adaptive moment estimation over a flat parameter vector"""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainingResult:
    params: ParameterVector
    history: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")

    @property
    def monotone_ok(self) -> bool:
        return bool(self.history) and self.history[-1] <= self.history[0]


@dataclass(frozen=True)
class Batch:
    """One minibatch plus the context a stochastic loss may need"""

    xs: np.ndarray
    ys: np.ndarray
    stream: RandomStream
    epoch: int
    num_batches: int


BatchLoss = Callable[[Tape, Dict[str, Tensor], Batch], Tensor]


def fit(init: ParameterVector, batch_loss: BatchLoss, data: Dataset, tcfg: TrainConfig,
        monitor: Optional[Callable[[ParameterVector], float]] = None, label: str = "mlp") -> TrainingResult:
    """
    Minibatch Adam on `batch_loss`, reshuffling every epoch from the procedural stream.

    `monitor` evaluates the full-batch loss at epoch end; without it the epoch
    history records the mean minibatch loss.
    """
    if data.n == 0:
        raise ContractViolation("cannot train on an empty dataset")
    procedural = RandomStream(tcfg.seed)
    order_stream = procedural.split("batches")
    noise_stream = procedural.split("noise")
    batch_size = min(tcfg.batch_size, data.n)
    num_batches = math.ceil(data.n / batch_size)
    optimizer = Adam(tcfg.learning_rate)
    params = init
    result = TrainingResult(params)

    for epoch in range(1, tcfg.epochs + 1):
        order = order_stream.permutation(data.n)
        batch_losses = []
        for start in range(0, data.n, batch_size):
            idx = order[start:start + batch_size]
            batch = Batch(data.xs[idx], data.ys[idx], noise_stream, epoch, num_batches)
            try:
                loss, grad = ad.grad_at(params, lambda tape, P: batch_loss(tape, P, batch))
            except NumericError as e:
                raise TrainingError(epoch, f"{label}: {e}") from e
            if not np.all(np.isfinite(grad)):
                raise TrainingError(epoch, f"{label}: non-finite gradient")
            params = params.with_values(optimizer.step(params.values, grad))
            batch_losses.append(loss)

        epoch_loss = monitor(params) if monitor is not None else float(np.mean(batch_losses))
        if not math.isfinite(epoch_loss):
            raise TrainingError(epoch, f"{label}: non-finite epoch loss")
        result.history.append(epoch_loss)
        if epoch == 1 or epoch == tcfg.epochs or epoch % 100 == 0:
            logger.debug(f"{label} epoch {epoch}/{tcfg.epochs} loss={epoch_loss:.6f}")

    result.params = params
    if not result.monotone_ok:
        logger.warning(f"{label}: final loss {result.final_loss:.4f} exceeds first-epoch loss {result.history[0]:.4f}")
    return result


# -------------------------
# Heteroscedastic regression
# -------------------------

class MlpPredictor:
    """
    Trained mean / variance network.
    Deterministic prediction is shareable; dropout-active prediction consumes the
    inference stream and is single-owner. One dropout-active call draws one mask
    for the whole batch, so a pass is a single sub-network.
    """

    def __init__(self, mlp: MLP, params: ParameterVector, seed: int,
                 result: Optional[TrainingResult] = None):
        self.mlp = mlp
        self.params = params
        self.seed = seed
        self.result = result
        self.inference_stream = RandomStream(seed).split("inference")

    def predict_batch(self, xs: np.ndarray, dropout_active: bool = False,
                      params: Optional[ParameterVector] = None) -> Tuple[np.ndarray, np.ndarray]:
        xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
        masks = None
        if dropout_active and self.mlp.config.dropout_rate > 0:
            masks = self.mlp.dropout_masks(self.inference_stream, xs.size, shared=True)
        out = self.mlp.evaluate(params if params is not None else self.params, xs, masks)
        variance = np.exp(np.clip(out["log_variance"], LOG_VAR_MIN, LOG_VAR_MAX))
        return out["mean"], variance

    def predict(self, x: float, dropout_active: bool = False) -> FirstOrderPrediction:
        mean, variance = self.predict_batch(np.array([x]), dropout_active)
        return FirstOrderPrediction(float(mean[0]), float(variance[0]))


def gaussian_batch_loss(mlp: MLP, prior_precision: float = 0.0, n_total: int = 1) -> BatchLoss:
    """Mean Gaussian NLL of a minibatch, plus an optional isotropic Gaussian prior on the weights"""

    def loss(tape: Tape, P: Dict[str, Tensor], batch: Batch) -> Tensor:
        masks = mlp.dropout_masks(batch.stream, batch.xs.size) if mlp.config.dropout_rate > 0 else None
        out = mlp.forward(tape, P, batch.xs, masks)
        y = tape.constant(batch.ys.reshape(-1, 1))
        value = ad.mean(gaussian_nll_terms(out["mean"], clamped_log_variance(out["log_variance"]), y))
        if prior_precision > 0:
            value = value + (0.5 * prior_precision / n_total) * l2_penalty(P)
        return value

    return loss


def full_batch_nll(mlp: MLP, data: Dataset) -> Callable[[ParameterVector], float]:
    def monitor(params: ParameterVector) -> float:
        out = mlp.evaluate(params, data.xs)
        log_var = np.clip(out["log_variance"], LOG_VAR_MIN, LOG_VAR_MAX)
        resid = data.ys - out["mean"]
        return float(np.mean(HALF_LOG_2PI + 0.5 * log_var + 0.5 * resid ** 2 * np.exp(-log_var)))

    return monitor


def train_mlp(data: Dataset, mcfg: MlpConfig, tcfg: TrainConfig, prior_precision: float = 0.0,
              label: str = "mlp") -> MlpPredictor:
    """Maximum-likelihood (or MAP, with prior_precision > 0) fit of a heteroscedastic MLP"""
    if data.n == 0:
        raise ContractViolation("cannot train on an empty dataset")
    if tuple(mcfg.heads) != GAUSSIAN_HEADS:
        raise ContractViolation(f"train_mlp needs heads {GAUSSIAN_HEADS}, got {mcfg.heads}")
    mlp = MLP(mcfg)
    init = mlp.init_params(RandomStream(tcfg.seed).split("init"))
    result = fit(init, gaussian_batch_loss(mlp, prior_precision, data.n), data, tcfg,
                 monitor=full_batch_nll(mlp, data), label=label)
    return MlpPredictor(mlp, result.params, tcfg.seed, result)
