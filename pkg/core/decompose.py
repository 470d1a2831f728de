"""
Disentangle - Uncertainty Decompositions
Variance-based aleatoric/epistemic split, Normal-Inverse-Gamma closed forms,
procedural/data split by the law of total variance, bias terms, and the
reference distribution obtained by retraining over datasets and seeds.

Population variance (divide by count) is used throughout; the mixture and
total-variance identities below only hold under that convention.
"""

import logging
import math
import traceback
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.dgp import DgpSpec, generate_dataset
from core.errors import ContractViolation, HarnessError, NumericError
from core.nn import FirstOrderPrediction, MlpConfig, TrainConfig, train_mlp
from core.rng import RandomStream

logger = logging.getLogger(__name__)

IDENTITY_RTOL = 1e-9
MIN_COMPLETED_FRACTION = 0.9


# -------------------------
# Types
# -------------------------

@dataclass(frozen=True)
class UncertaintyEstimate:
    aleatoric: float
    epistemic: float

    def __post_init__(self):
        for name in ("aleatoric", "epistemic"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ContractViolation(f"{name} estimate must be finite and nonnegative, got {value}")

    @property
    def total(self) -> float:
        return self.aleatoric + self.epistemic


@dataclass(frozen=True)
class SecondOrderSample:
    """Finite set of first-order predictions at one query point: the empirical q(theta | x)"""

    members: Tuple[FirstOrderPrediction, ...]
    query_x: float

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ContractViolation("second-order sample needs at least one member")
        object.__setattr__(self, "members", members)

    @classmethod
    def from_arrays(cls, means: np.ndarray, variances: np.ndarray, query_x: float) -> "SecondOrderSample":
        return cls(tuple(FirstOrderPrediction(float(m), float(v)) for m, v in zip(means, variances)), float(query_x))

    def __len__(self) -> int:
        return len(self.members)

    @property
    def means(self) -> np.ndarray:
        return np.array([m.mean for m in self.members])

    @property
    def variances(self) -> np.ndarray:
        return np.array([m.variance for m in self.members])

    @property
    def mixture_mean(self) -> float:
        return float(self.means.mean())

    def mixture_variance(self) -> float:
        """Variance of the equal-weight Gaussian mixture, from its raw second moment"""
        mu = self.means
        return float(np.mean(self.variances + mu * mu) - mu.mean() ** 2)


@dataclass(frozen=True)
class NigParams:
    """Normal-Inverse-Gamma parameters (gamma, nu, alpha, beta)"""

    gamma: float
    nu: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.nu > 0 and self.alpha > 1 and self.beta > 0):
            raise ContractViolation(f"NIG needs nu > 0, alpha > 1, beta > 0; got {self}")


@dataclass(frozen=True)
class ReferenceGrid:
    """n_d x n_gamma first-order predictions at one query point"""

    query_x: float
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64)
        variances = np.array(self.variances, dtype=np.float64)
        if means.ndim != 2 or means.shape != variances.shape:
            raise ContractViolation(f"grid needs matching 2-d matrices, got {means.shape} and {variances.shape}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise ContractViolation(f"grid at x={self.query_x} is not fully populated")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def n_d(self) -> int:
        return self.means.shape[0]

    @property
    def n_gamma(self) -> int:
        return self.means.shape[1]

    def prediction(self, d_index: int, gamma_index: int) -> FirstOrderPrediction:
        return FirstOrderPrediction(float(self.means[d_index, gamma_index]),
                                    float(self.variances[d_index, gamma_index]))


@dataclass(frozen=True)
class EpistemicBreakdown:
    procedural: float
    data: float
    total: float
    bias: float = 0.0
    squared_bias: float = 0.0
    aleatoric: float = 0.0

    def __post_init__(self):
        if abs(self.procedural + self.data - self.total) > IDENTITY_RTOL * max(1.0, self.total):
            raise NumericError("total_variance_split",
                               f"procedural {self.procedural} + data {self.data} != total {self.total}")


# -------------------------
# Mixture decompositions
# -------------------------

def variance_decomposition(sample: SecondOrderSample) -> UncertaintyEstimate:
    """Aleatoric = mean member variance; epistemic = population variance of member means"""
    if sample is None or len(sample) == 0:
        raise ContractViolation("variance_decomposition needs a nonempty sample")
    _, aleatoric, epistemic = variance_decomposition_arrays(sample.means[:, None], sample.variances[:, None])
    return UncertaintyEstimate(float(aleatoric[0]), float(epistemic[0]))


def variance_decomposition_arrays(means: np.ndarray, variances: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised over query points: member axis 0, query axis 1"""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape != variances.shape or means.ndim != 2 or means.shape[0] == 0:
        raise ContractViolation(f"expected matching (members, points) arrays, got {means.shape} / {variances.shape}")
    mixture_mean = means.mean(axis=0)
    aleatoric = variances.mean(axis=0)
    epistemic = np.mean((means - mixture_mean) ** 2, axis=0)
    return mixture_mean, aleatoric, epistemic


def der_decomposition(p: NigParams) -> UncertaintyEstimate:
    """Aleatoric = beta / (alpha - 1); epistemic = beta / (nu (alpha - 1))"""
    if p.alpha <= 1:
        raise ContractViolation(f"alpha must exceed 1 for finite moments, got {p.alpha}")
    aleatoric, epistemic = der_decomposition_arrays(np.array([p.nu]), np.array([p.alpha]), np.array([p.beta]))
    return UncertaintyEstimate(float(aleatoric[0]), float(epistemic[0]))


def der_decomposition_arrays(nu: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if np.any(alpha <= 1) or np.any(nu <= 0) or np.any(beta <= 0):
        raise ContractViolation("NIG parameters out of range")
    aleatoric = beta / (alpha - 1.0)
    return aleatoric, aleatoric / nu


# -------------------------
# Reference-grid decompositions
# -------------------------

def split_arrays(means: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Law-of-total-variance split over (..., n_d, n_gamma) member means"""
    means = np.asarray(means, dtype=np.float64)
    row_means = means.mean(axis=-1)
    procedural = np.mean((means - row_means[..., None]) ** 2, axis=(-2, -1))
    data = np.mean((row_means - row_means.mean(axis=-1, keepdims=True)) ** 2, axis=-1)
    grand = means.mean(axis=(-2, -1))
    total = np.mean((means - grand[..., None, None]) ** 2, axis=(-2, -1))
    return procedural, data, total


def total_variance_split(grid: ReferenceGrid) -> EpistemicBreakdown:
    """Procedural / data / total variance of member means; bias fields stay at zero (see bias_terms)"""
    if grid.n_d < 2 or grid.n_gamma < 2:
        raise ContractViolation(f"variance split needs n_d >= 2 and n_gamma >= 2, got {grid.n_d}x{grid.n_gamma}")
    procedural, data, total = split_arrays(grid.means)
    return EpistemicBreakdown(float(procedural), float(data), float(total),
                              aleatoric=float(grid.variances.mean()))


def bias_terms(grid: ReferenceGrid, truth_mean: float) -> EpistemicBreakdown:
    """
    Signed bias of the grand-mean prediction and its square, together with the
    variance split. Checks that the mean squared deviation from the truth
    equals total variance plus squared bias.
    """
    grand = float(grid.means.mean())
    bias = grand - truth_mean
    total = float(np.mean((grid.means - grand) ** 2))
    msd = float(np.mean((truth_mean - grid.means) ** 2))
    if abs(msd - (total + bias * bias)) > IDENTITY_RTOL * max(1.0, msd):
        raise NumericError("bias_terms", f"mean squared deviation {msd} != variance {total} + bias^2 {bias * bias}")
    if grid.n_d >= 2 and grid.n_gamma >= 2:
        split = total_variance_split(grid)
    else:
        split = EpistemicBreakdown(0.0, total, total, aleatoric=float(grid.variances.mean()))
    return replace(split, bias=bias, squared_bias=bias * bias)


# -------------------------
# Reference distribution
# -------------------------

@dataclass
class ReferenceResult:
    """Reference grids at every query point plus their breakdowns"""

    xs: np.ndarray
    means: np.ndarray          # (n_x, n_d, n_gamma)
    variances: np.ndarray      # (n_x, n_d, n_gamma)
    truth: np.ndarray
    kept_rows: List[int]
    failures: List[Tuple[int, int, str]] = field(default_factory=list)
    breakdowns: List[EpistemicBreakdown] = field(default_factory=list)

    def grid(self, i: int) -> ReferenceGrid:
        return ReferenceGrid(float(self.xs[i]), self.means[i], self.variances[i])

    def arrays(self) -> dict:
        """Per-x breakdown columns as arrays"""
        keys = ("procedural", "data", "total", "bias", "squared_bias", "aleatoric")
        return {k: np.array([getattr(b, k) for b in self.breakdowns]) for k in keys}


def _train_reference_cell(args) -> Tuple[int, int, Optional[np.ndarray], Optional[np.ndarray], str]:
    d_index, g_index, spec, n, dataset_seed, mcfg, tcfg, xs = args
    try:
        data = generate_dataset(spec, n, dataset_seed)
        model = train_mlp(data, mcfg, tcfg, label=f"reference[d={d_index},g={g_index}]")
        means, variances = model.predict_batch(xs)
        return d_index, g_index, means, variances, ""
    except Exception:
        return d_index, g_index, None, None, traceback.format_exc()


MapFn = Callable[[Callable, Iterable], Iterable]


def estimate_reference(spec: DgpSpec, N: int, n_d: int, n_gamma: int, train_cfg: TrainConfig,
                       query_points: Sequence[float], dataset_seeds: Sequence[int],
                       mlp_cfg: MlpConfig = MlpConfig(), map_fn: Optional[MapFn] = None) -> ReferenceResult:
    """
    Train n_d x n_gamma MLPs (dataset draw x procedural draw) and decompose their
    predictions at every query point.

    Dataset draws use `dataset_seeds[:n_d]`; procedural seeds are split from
    `train_cfg.seed`. Cells that fail are recorded; rows containing a failure are
    dropped, and fewer than 90% completed cells is a hard error.
    """
    if n_d < 2 or n_gamma < 2:
        raise ContractViolation(f"reference needs n_d >= 2 and n_gamma >= 2, got {n_d}x{n_gamma}")
    if len(dataset_seeds) < n_d:
        raise ContractViolation(f"need {n_d} dataset seeds, got {len(dataset_seeds)}")
    xs = np.asarray(query_points, dtype=np.float64)
    procedural = RandomStream(train_cfg.seed).split("reference-procedural")

    jobs = []
    for d in range(n_d):
        for g in range(n_gamma):
            cell_seed = procedural.split("cell", d * n_gamma + g).seed
            cell_cfg = replace(train_cfg, seed=cell_seed)
            jobs.append((d, g, spec, N, int(dataset_seeds[d]), mlp_cfg, cell_cfg, xs))

    means = np.full((n_d, n_gamma, xs.size), np.nan)
    variances = np.full((n_d, n_gamma, xs.size), np.nan)
    failures: List[Tuple[int, int, str]] = []
    results = (map_fn or map)(_train_reference_cell, jobs)
    for d, g, m, v, err in sorted(results, key=lambda r: (r[0], r[1])):
        if err:
            logger.error(f"Reference cell (d={d}, g={g}) failed: {err.strip().splitlines()[-1]}")
            failures.append((d, g, err))
            continue
        means[d, g] = m
        variances[d, g] = v

    completed = n_d * n_gamma - len(failures)
    if completed < MIN_COMPLETED_FRACTION * n_d * n_gamma:
        raise HarnessError(f"reference N={N}: only {completed}/{n_d * n_gamma} cells completed")
    failed_rows = {d for d, _, _ in failures}
    kept = [d for d in range(n_d) if d not in failed_rows]
    if len(kept) < 2:
        raise HarnessError(f"reference N={N}: fewer than two complete dataset rows")

    # (n_x, n_d, n_gamma)
    means = np.transpose(means[kept], (2, 0, 1))
    variances = np.transpose(variances[kept], (2, 0, 1))
    truth = spec.mean(xs)
    result = ReferenceResult(xs, means, variances, truth, kept, failures)
    result.breakdowns = [bias_terms(result.grid(i), float(truth[i])) for i in range(xs.size)]
    logger.info(f"Reference N={N}: {completed}/{n_d * n_gamma} cells, "
                f"mean total epistemic {np.mean([b.total for b in result.breakdowns]):.5f}")
    return result
