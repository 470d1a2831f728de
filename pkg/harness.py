"""
Disentangle - Experiment Harness
Orchestrates the protocol: one task per (method, N, run seed), a bounded
process pool, per-task error capture, and a deterministic merge into the run
directory's tables, figures, reference grids and manifest
"""

import logging
import logging.handlers
import traceback
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    CONFIG_SNAPSHOT_FILENAME,
    LOG_BACKUP_COUNT,
    LOG_DIRNAME,
    LOG_FILENAME,
    LOG_FORMAT,
    LOG_LEVEL,
    MAX_LOG_SIZE_MB,
    PROJECT_NAME,
    REFERENCE,
    ExperimentConfig,
    dump_document,
    resolve_per_size,
)
from core.artifact import GRID_PATTERN, RunArtifact, write_manifest
from core.database import TaskLedger
from core.decompose import ReferenceResult, bias_terms, estimate_reference
from core.dgp import DgpSpec, evaluation_grid, generate_dataset
from core.errors import HarnessError
from core.nn import TrainConfig
from core.report import (
    ROW_ORDER,
    FigureSeries,
    RegionMetrics,
    RunMetrics,
    breakdown_filename,
    compute_run_metrics,
    emit_outputs,
    grid_filename,
    read_reference_grid,
    region_metrics,
    write_breakdown,
    write_reference_grid,
)
from core.rng import RandomStream
from methods import fit_method, mlp_config

logger = logging.getLogger(__name__)


def setup_logging(run_dir: Optional[Path] = None, level: str = LOG_LEVEL):
    """Console logging once per process, plus a rotating log file inside the run directory"""
    root = logging.getLogger()
    if not any(getattr(h, "_disentangle_console", False) for h in root.handlers):
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter(LOG_FORMAT))
        console._disentangle_console = True
        root.addHandler(console)
    root.setLevel(level)
    if run_dir is None:
        return
    # one run log at a time
    for old in [h for h in root.handlers if getattr(h, "_disentangle_run", False)]:
        root.removeHandler(old)
        old.close()
    log_path = Path(run_dir) / LOG_DIRNAME / LOG_FILENAME
    log_path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.handlers.RotatingFileHandler(
        log_path, maxBytes=MAX_LOG_SIZE_MB * 1024 * 1024, backupCount=LOG_BACKUP_COUNT, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._disentangle_run = True
    root.addHandler(handler)


class _WarningCollector(logging.Handler):
    """Collects WARNING records emitted while one task runs"""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: List[str] = []

    def emit(self, record: logging.LogRecord):
        self.messages.append(record.getMessage())


@contextmanager
def collect_warnings() -> Iterator[_WarningCollector]:
    collector = _WarningCollector()
    root = logging.getLogger()
    root.addHandler(collector)
    try:
        yield collector
    finally:
        root.removeHandler(collector)


# -------------------------
# Tasks
# -------------------------

@dataclass(frozen=True)
class Task:
    method: str
    N: int
    run_seed: int

    @property
    def key(self) -> str:
        return f"{self.method}/{self.N}/{self.run_seed}"

    @property
    def order(self) -> Tuple[int, int, int]:
        return ROW_ORDER.get(self.method, len(ROW_ORDER)), self.N, self.run_seed


@dataclass
class TaskResult:
    task: Task
    metrics: Optional[RunMetrics] = None
    regions: List[RegionMetrics] = field(default_factory=list)
    figure: Optional[FigureSeries] = None
    reference: Optional[ReferenceResult] = None
    files: List[Path] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    error: str = ""


def procedural_seed(task: Task) -> int:
    """Seed of the method's procedural randomness, disjoint from the dataset stream of the same run seed"""
    return RandomStream(task.run_seed).split(f"procedural:{task.method}", task.N).seed


def _summarise(task: Task, xs: np.ndarray, mean: np.ndarray, aleatoric: np.ndarray, epistemic: np.ndarray,
               cfg: ExperimentConfig, spec: DgpSpec, result: TaskResult):
    result.metrics = compute_run_metrics(task.method, task.N, task.run_seed, xs, mean, aleatoric, epistemic, spec)
    result.regions = region_metrics(task.method, task.N, task.run_seed, xs, mean, aleatoric, epistemic,
                                    spec, cfg.region_split)
    if task.run_seed == cfg.run_seeds[0]:
        result.figure = FigureSeries.build(xs, mean, aleatoric, epistemic, spec)


def execute_task(args: Tuple[Task, ExperimentConfig, Path]) -> TaskResult:
    """Generate the dataset, fit one method, evaluate it on the test grid; errors are captured, not raised"""
    task, cfg, run_dir = args
    result = TaskResult(task)
    with collect_warnings() as collector:
        try:
            spec = DgpSpec(**cfg.dgp)
            xs = evaluation_grid(cfg.grid.count, cfg.grid.lo, cfg.grid.hi)
            data = generate_dataset(spec, task.N, task.run_seed)
            predictor = fit_method(task.method, data, cfg, procedural_seed(task))
            estimate = predictor.uncertainty(xs)
            _summarise(task, xs, estimate.mean, estimate.aleatoric, estimate.epistemic, cfg, spec, result)
            if cfg.save_weights:
                weight_dir = Path(run_dir) / "weights" / f"{task.method}_{task.N}_{task.run_seed}"
                weight_dir.mkdir(parents=True, exist_ok=True)
                predictor.save(weight_dir)
                result.files.extend(sorted(weight_dir.iterdir()))
        except Exception:
            result.error = traceback.format_exc()
    result.warnings = collector.messages
    return result


def reference_train_config(cfg: ExperimentConfig, N: int, seed: int) -> TrainConfig:
    ref = cfg.reference
    return TrainConfig(
        learning_rate=float(ref.learning_rate),
        epochs=int(resolve_per_size(ref.epochs, N, "reference.epochs")),
        batch_size=int(resolve_per_size(ref.batch_size, N, "reference.batch_size", fallback=cfg.batch_size_for(N))),
        seed=seed,
    )


def reference_breakdown(xs: np.ndarray, means: np.ndarray, variances: np.ndarray, spec: DgpSpec) -> ReferenceResult:
    """Breakdowns of a stored (n_x, n_d, n_gamma) grid against the true conditional mean"""
    n_d = means.shape[1]
    result = ReferenceResult(xs, means, variances, spec.mean(xs), list(range(n_d)))
    result.breakdowns = [bias_terms(result.grid(i), float(result.truth[i])) for i in range(xs.size)]
    return result


# -------------------------
# Orchestrator
# -------------------------

class Harness:
    """
    Disentangle experiment harness - main orchestrator class
    Handles task dispatch, failure capture and run-artifact emission
    """

    def __init__(self, cfg: ExperimentConfig, run_dir: Optional[Path] = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir or cfg.output_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        setup_logging(self.run_dir)
        self.spec = DgpSpec(**cfg.dgp)
        self.xs = evaluation_grid(cfg.grid.count, cfg.grid.lo, cfg.grid.hi)
        self.ledger = TaskLedger(self.run_dir)
        self.artifact = RunArtifact(self.run_dir)
        logger.info(f"{PROJECT_NAME} harness ready: run directory {self.run_dir}")

    def tasks(self, methods: Optional[Sequence[str]] = None, sizes: Optional[Sequence[int]] = None) -> List[Task]:
        methods = list(methods if methods is not None else self.cfg.methods)
        sizes = list(sizes if sizes is not None else self.cfg.sample_sizes)
        tasks = [Task(m, n, s) for m in methods for n in sizes for s in self.cfg.run_seeds]
        return sorted(tasks, key=lambda t: t.order)

    @contextmanager
    def _executor(self):
        if self.cfg.parallelism > 1:
            with ProcessPoolExecutor(max_workers=self.cfg.parallelism) as pool:
                yield pool
        else:
            yield None

    def run(self) -> RunArtifact:
        """Full protocol: every configured method and the reference, then tables, figures and manifest"""
        return self._run(self.tasks())

    def run_reference(self, sizes: Optional[Sequence[int]] = None) -> RunArtifact:
        return self._run(self.tasks([REFERENCE], sizes))

    def _run(self, tasks: List[Task]) -> RunArtifact:
        self._write_snapshot()
        method_tasks = [t for t in tasks if t.method != REFERENCE]
        reference_tasks = [t for t in tasks if t.method == REFERENCE]
        logger.info(f"Running {len(method_tasks)} method tasks and {len(reference_tasks)} reference tasks")

        results: List[TaskResult] = []
        with self._executor() as pool:
            for task in method_tasks:
                self.ledger.start(task.key, task.method, task.N, task.run_seed)
            jobs = [(t, self.cfg, self.run_dir) for t in method_tasks]
            outputs = pool.map(execute_task, jobs) if pool is not None else map(execute_task, jobs)
            for result in outputs:
                self._record(result)
                results.append(result)
            for task in reference_tasks:
                self.ledger.start(task.key, task.method, task.N, task.run_seed)
                result = self._execute_reference(task, pool)
                self._record(result)
                results.append(result)

        self._emit(sorted(results, key=lambda r: r.task.order))
        return self.artifact

    def _execute_reference(self, task: Task, pool) -> TaskResult:
        result = TaskResult(task)
        with collect_warnings() as collector:
            try:
                ref = self.cfg.reference
                reference = estimate_reference(
                    self.spec, task.N, ref.n_d, ref.n_gamma, reference_train_config(self.cfg, task.N, task.run_seed),
                    self.xs, self.cfg.dataset_seeds, mlp_config(self.cfg),
                    map_fn=pool.map if pool is not None else None)
                columns = reference.arrays()
                _summarise(task, self.xs, reference.means.mean(axis=(1, 2)), columns["aleatoric"], columns["total"],
                           self.cfg, self.spec, result)
                result.reference = reference
                for d, g, err in reference.failures:
                    result.warnings.append(f"reference cell (d={d}, g={g}) failed: {err.strip().splitlines()[-1]}")
            except Exception:
                result.error = traceback.format_exc()
        result.warnings = collector.messages + result.warnings
        return result

    def _record(self, result: TaskResult):
        """Ledger bookkeeping for one finished task"""
        key = result.task.key
        for message in result.warnings:
            self.ledger.warn(key, message)
            self.artifact.warnings.append({"task": key, "message": message})
        if result.error:
            logger.error(f"Task {key} failed: {result.error.strip().splitlines()[-1]}")
            self.ledger.fail(key, result.error)
            self.artifact.failures.append({"task": key, "traceback": result.error})
        else:
            self.ledger.finish(key, {"epistemic": result.metrics.epistemic} if result.metrics else None)
            logger.info(f"Task {key} finished")

    def _emit(self, results: List[TaskResult]):
        done = [r for r in results if not r.error]
        metrics = [r.metrics for r in done]
        figures = {(r.task.method, r.task.N): r.figure for r in done if r.figure is not None}
        regions = [region for r in done for region in r.regions]
        self.artifact.files.extend(emit_outputs(metrics, figures, self.run_dir, regions))
        for r in done:
            self.artifact.files.extend(r.files)
            if r.reference is not None:
                ref = r.reference
                self.artifact.files.append(write_reference_grid(
                    ref.xs, ref.means, ref.variances, self.run_dir / grid_filename(r.task.N, r.task.run_seed)))
                self.artifact.files.append(write_breakdown(
                    ref.xs, ref.arrays(), self.run_dir / breakdown_filename(r.task.N, r.task.run_seed)))
        write_manifest(self.artifact, {"config_snapshot": CONFIG_SNAPSHOT_FILENAME})
        if self.artifact.failures:
            logger.warning(f"Run finished with {len(self.artifact.failures)} failed tasks")
        else:
            logger.info("Run finished successfully")

    def _write_snapshot(self):
        path = self.run_dir / CONFIG_SNAPSHOT_FILENAME
        path.write_text(dump_document(self.cfg.document), encoding="utf-8")
        self.artifact.files.append(path)


def run_experiment(cfg: ExperimentConfig, run_dir: Optional[Path] = None) -> RunArtifact:
    return Harness(cfg, run_dir).run()


def decompose_grid_file(grid_path: Path, spec: DgpSpec = DgpSpec()) -> Path:
    """Recompute the breakdown of a stored reference grid and write it next to the grid"""
    grid_path = Path(grid_path)
    xs, means, variances = read_reference_grid(grid_path)
    if means.shape[1] < 2 or means.shape[2] < 2:
        raise HarnessError(f"{grid_path}: need at least a 2x2 grid, got {means.shape[1]}x{means.shape[2]}")
    result = reference_breakdown(xs, means, variances, spec)
    match = GRID_PATTERN.search(grid_path.name)
    name = breakdown_filename(int(match.group(1)), int(match.group(2))) if match else f"{grid_path.stem}_breakdown.csv"
    out = write_breakdown(xs, result.arrays(), grid_path.parent / name)
    logger.info(f"Breakdown written to {out}")
    return out
