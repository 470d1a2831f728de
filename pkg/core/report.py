"""
Disentangle - Reporting
Per-run metrics on the test grid, aggregation across runs, and the CSV tables
and figure series written into a run directory
"""

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import BAND_QUANTILE, METHOD_NAMES, REFERENCE
from core.dgp import DgpSpec
from core.errors import ArtifactError, ContractViolation, ReportingError

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("aleatoric", "epistemic", "bias", "sigma_dist")
TABLE_COLUMNS = ["method", "N"] + [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "std")]
FIGURE_COLUMNS = ["x", "pred_mean", "alea_halfwidth", "true_mean", "true_halfwidth", "epistemic"]
REGION_COLUMNS = ["method", "N", "run_seed", "region", "aleatoric", "epistemic", "bias", "sigma_dist", "true_sigma2"]
BREAKDOWN_COLUMNS = ["x", "procedural", "data", "total", "bias", "squared_bias", "aleatoric"]
GRID_COLUMNS = ["x", "d_index", "gamma_index", "mean", "variance"]

ROW_ORDER = {name: i for i, name in enumerate(METHOD_NAMES + (REFERENCE,))}


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.17g}"


# -------------------------
# Metrics
# -------------------------

@dataclass(frozen=True)
class RunMetrics:
    method: str
    N: int
    run_seed: int
    aleatoric: float
    epistemic: float
    bias: float
    sigma_dist: float

    def __post_init__(self):
        for name in METRIC_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise ReportingError(None, f"{self.method} N={self.N} seed={self.run_seed}: {name} is not finite")


@dataclass(frozen=True)
class RegionMetrics:
    method: str
    N: int
    run_seed: int
    region: str
    aleatoric: float
    epistemic: float
    bias: float
    sigma_dist: float
    true_sigma2: float


@dataclass(frozen=True)
class FigureSeries:
    xs: np.ndarray
    pred_mean: np.ndarray
    alea_halfwidth: np.ndarray
    true_mean: np.ndarray
    true_halfwidth: np.ndarray
    epistemic: np.ndarray

    def __post_init__(self):
        n = len(self.xs)
        for name in FIGURE_COLUMNS[1:]:
            if len(getattr(self, name)) != n:
                raise ContractViolation(f"figure column {name} has {len(getattr(self, name))} entries, expected {n}")
        if np.any(self.alea_halfwidth < 0) or np.any(self.true_halfwidth < 0):
            raise ContractViolation("band halfwidths must be nonnegative")

    @classmethod
    def build(cls, xs: np.ndarray, mean: np.ndarray, aleatoric: np.ndarray, epistemic: np.ndarray,
              spec: DgpSpec) -> "FigureSeries":
        return cls(np.asarray(xs), np.asarray(mean), BAND_QUANTILE * np.sqrt(aleatoric),
                   spec.mean(xs), BAND_QUANTILE * np.sqrt(spec.variance(xs)), np.asarray(epistemic))


def _check_finite(xs: np.ndarray, *arrays: np.ndarray):
    for arr in arrays:
        bad = ~np.isfinite(arr)
        if np.any(bad):
            raise ReportingError(float(xs[np.argmax(bad)]), "non-finite prediction")


def compute_run_metrics(method: str, N: int, run_seed: int, xs: np.ndarray, mean: np.ndarray,
                        aleatoric: np.ndarray, epistemic: np.ndarray, spec: DgpSpec) -> RunMetrics:
    """Grid means of aleatoric and epistemic variance, |mean - f|, and |sigma_hat - sigma|"""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    if xs.size == 0:
        raise ContractViolation("test grid is empty")
    mean, aleatoric, epistemic = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (mean, aleatoric, epistemic))
    _check_finite(xs, mean, aleatoric, epistemic)
    bad = aleatoric < 0
    if np.any(bad):
        raise ReportingError(float(xs[np.argmax(bad)]), "negative aleatoric variance")
    return RunMetrics(
        method=method, N=N, run_seed=run_seed,
        aleatoric=float(aleatoric.mean()),
        epistemic=float(epistemic.mean()),
        bias=float(np.mean(np.abs(mean - spec.mean(xs)))),
        sigma_dist=float(np.mean(np.abs(np.sqrt(aleatoric) - np.sqrt(spec.variance(xs))))),
    )


def region_metrics(method: str, N: int, run_seed: int, xs: np.ndarray, mean: np.ndarray,
                   aleatoric: np.ndarray, epistemic: np.ndarray, spec: DgpSpec, split: float) -> List[RegionMetrics]:
    """The same metrics restricted to x < split (left) and x >= split (right)"""
    out = []
    for region, mask in (("left", xs < split), ("right", xs >= split)):
        if not np.any(mask):
            continue
        m = compute_run_metrics(method, N, run_seed, xs[mask], mean[mask], aleatoric[mask], epistemic[mask], spec)
        out.append(RegionMetrics(method, N, run_seed, region, m.aleatoric, m.epistemic, m.bias, m.sigma_dist,
                                 float(np.mean(spec.variance(xs[mask])))))
    return out


# -------------------------
# Aggregation
# -------------------------

@dataclass
class AggregateRow:
    method: str
    N: int
    runs: int
    means: Dict[str, float] = field(default_factory=dict)
    stds: Dict[str, float] = field(default_factory=dict)

    @property
    def single_run(self) -> bool:
        return self.runs == 1


def aggregate_group(runs: Sequence[RunMetrics]) -> AggregateRow:
    if not runs:
        raise ContractViolation("cannot aggregate an empty group")
    row = AggregateRow(runs[0].method, runs[0].N, len(runs))
    for name in METRIC_FIELDS:
        values = np.array([getattr(r, name) for r in runs])
        row.means[name] = float(values.mean())
        row.stds[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    if row.single_run:
        logger.warning(f"{row.method} N={row.N}: single run, std reported as 0")
    return row


def aggregate_runs(metrics: Iterable[RunMetrics]) -> List[AggregateRow]:
    """Mean and sample std (ddof=1) per (method, N), in table order"""
    groups: Dict[Tuple[str, int], List[RunMetrics]] = defaultdict(list)
    for m in metrics:
        groups[(m.method, m.N)].append(m)
    keys = sorted(groups, key=lambda k: (ROW_ORDER.get(k[0], len(ROW_ORDER)), k[0], k[1]))
    return [aggregate_group(sorted(groups[k], key=lambda r: r.run_seed)) for k in keys]


# -------------------------
# CSV emission
# -------------------------

def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
    except OSError as e:
        raise ArtifactError(f"cannot write {path}: {e}") from e
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as e:
        raise ArtifactError(f"cannot read {path}: {e}") from e


def write_table(rows: Sequence[AggregateRow], path: Path) -> Path:
    body = ([r.method, r.N] + [v for m in METRIC_FIELDS for v in (r.means[m], r.stds[m])] for r in rows)
    return write_csv(path, TABLE_COLUMNS, body)


def write_figure(series: FigureSeries, path: Path) -> Path:
    columns = [getattr(series, name) for name in ("xs",) + tuple(FIGURE_COLUMNS[1:])]
    return write_csv(path, FIGURE_COLUMNS, zip(*columns))


def write_regions(regions: Sequence[RegionMetrics], path: Path) -> Path:
    return write_csv(path, REGION_COLUMNS, ([getattr(r, c) for c in REGION_COLUMNS] for r in regions))


def figure_filename(method: str, N: int) -> str:
    return f"figure_{method}_{N}.csv"


def emit_outputs(metrics: Sequence[RunMetrics], figures: Dict[Tuple[str, int], FigureSeries],
                 run_dir: Path, regions: Optional[Sequence[RegionMetrics]] = None) -> List[Path]:
    """Write table1.csv, one figure file per (method, N) and, when given, regions.csv"""
    run_dir = Path(run_dir)
    written = [write_table(aggregate_runs(metrics), run_dir / "table1.csv")]
    for method, N in sorted(figures, key=lambda k: (ROW_ORDER.get(k[0], len(ROW_ORDER)), k[1])):
        written.append(write_figure(figures[(method, N)], run_dir / figure_filename(method, N)))
    if regions is not None:
        ordered = sorted(regions, key=lambda r: (ROW_ORDER.get(r.method, len(ROW_ORDER)), r.N, r.run_seed, r.region))
        written.append(write_regions(ordered, run_dir / "regions.csv"))
    logger.info(f"Wrote {len(written)} report files to {run_dir}")
    return written


# -------------------------
# Reference grids
# -------------------------

def grid_filename(N: int, seed: int) -> str:
    return f"reference_grid_{N}_{seed}.csv"


def breakdown_filename(N: int, seed: int) -> str:
    return f"breakdown_{N}_{seed}.csv"


def write_reference_grid(xs: np.ndarray, means: np.ndarray, variances: np.ndarray, path: Path) -> Path:
    """One row per (x, dataset draw, procedural draw); arrays are (n_x, n_d, n_gamma)"""
    def rows():
        n_x, n_d, n_g = means.shape
        for i in range(n_x):
            for d in range(n_d):
                for g in range(n_g):
                    yield xs[i], d, g, means[i, d, g], variances[i, d, g]

    return write_csv(path, GRID_COLUMNS, rows())


def read_reference_grid(path: Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = read_csv(path)
    if not rows:
        raise ArtifactError(f"{path}: empty reference grid")
    try:
        xs = sorted({float(r["x"]) for r in rows})
        n_d = 1 + max(int(r["d_index"]) for r in rows)
        n_g = 1 + max(int(r["gamma_index"]) for r in rows)
        index = {x: i for i, x in enumerate(xs)}
        means = np.full((len(xs), n_d, n_g), np.nan)
        variances = np.full((len(xs), n_d, n_g), np.nan)
        for r in rows:
            key = (index[float(r["x"])], int(r["d_index"]), int(r["gamma_index"]))
            means[key] = float(r["mean"])
            variances[key] = float(r["variance"])
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"{path}: malformed reference grid ({e})") from e
    if np.any(np.isnan(means)):
        raise ArtifactError(f"{path}: reference grid is not fully populated")
    return np.array(xs), means, variances


def write_breakdown(xs: np.ndarray, columns: Dict[str, np.ndarray], path: Path) -> Path:
    return write_csv(path, BREAKDOWN_COLUMNS, zip(xs, *(columns[c] for c in BREAKDOWN_COLUMNS[1:])))
