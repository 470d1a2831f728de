"""
Disentangle Configuration
Centralized settings: process-level constants, the default experiment and the
experiment-document parser
"""

import copy
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from core.errors import ConfigError

# -------------------------
# Core Settings
# -------------------------
PROJECT_NAME = "Disentangle"

DEFAULT_CONFIG_PATH = Path(__file__).parent / "config.toml"
DEFAULT_OUTPUT_DIR = os.getenv("DISENTANGLE_OUTPUT_DIR", "runs")

# Predicted variances are clamped to this interval everywhere
VARIANCE_FLOOR = 1e-6
VARIANCE_CEILING = 1e6

# Normal quantile for the 95% bands in figure data
BAND_QUANTILE = 1.96

# -------------------------
# Logging Configuration
# -------------------------
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DIRNAME = "logs"
LOG_FILENAME = "harness.log"
MAX_LOG_SIZE_MB = 10
LOG_BACKUP_COUNT = 5

# -------------------------
# Run Artifacts
# -------------------------
LEDGER_FILENAME = "tasks.db"
MANIFEST_FILENAME = "manifest.json"
CONFIG_SNAPSHOT_FILENAME = "config_snapshot.toml"
DB_TIMEOUT = 30  # seconds

# Exit codes
EXIT_OK = 0
EXIT_TASK_FAILURE = 1
EXIT_CONFIG_ERROR = 2

# -------------------------
# Experiment defaults (method appendix)
# -------------------------
METHOD_NAMES = (
    "deep_ensemble",
    "bootstrap_ensemble",
    "mc_dropout",
    "vi",
    "laplace",
    "hmc",
    "der",
    "hetero_gp",
)
REFERENCE = "reference"

# Values that may be given as a table keyed by sample size (plus an optional "default")
PER_SIZE_KEYS = {"epochs", "pretrain_epochs", "batch_size"}

APPENDIX_DEFAULTS: Dict[str, Any] = {
    "experiment": {
        "methods": list(METHOD_NAMES) + [REFERENCE],
        "sample_sizes": [50, 100, 500],
        "batch_sizes": [32, 32, 64],
        "run_seeds": [7, 42, 123, 999, 2024],
        "dataset_seeds": [7, 42, 2024, 123, 999, 50, 100, 150, 200, 250,
                          300, 350, 400, 450, 500, 550, 600, 650, 700, 750],
        "output_dir": DEFAULT_OUTPUT_DIR,
        "parallelism": 1,
        "region_split": 0.2,
        "save_weights": False,
    },
    "dgp": {"beta_alpha": 1.2, "beta_beta": 0.5},
    "test_grid": {"count": 500, "lo": 0.01, "hi": 0.99},
    "mlp": {"hidden_layers": 4, "hidden_width": 100, "activation": "relu"},
    "reference": {"n_d": 20, "n_gamma": 10, "learning_rate": 0.009, "epochs": 500, "batch_size": {}},
    "methods": {
        "deep_ensemble": {
            "ensemble_size": 10, "learning_rate": 0.009,
            "epochs": {"50": 50, "100": 250, "500": 500}, "batch_size": {},
        },
        "bootstrap_ensemble": {
            "ensemble_size": 10, "learning_rate": 0.009, "fraction": 0.6,
            "epochs": {"50": 50, "100": 250, "500": 500}, "batch_size": {},
        },
        "mc_dropout": {
            "rate": 0.2, "learning_rate": 0.002, "epochs": 500, "samples": 500, "batch_size": {},
        },
        "vi": {
            "learning_rate": 0.005, "epochs": {"50": 250, "100": 250, "500": 500},
            "burn_in": 200, "beta": 5.0, "train_mc": 10, "test_mc": 500,
            "prior_sigma": 1.0, "init_rho": -5.0, "batch_size": {},
        },
        "laplace": {
            "learning_rate": 0.005, "epochs": {"50": 200, "100": 400, "500": 800},
            "prior_precision": 1.0, "noise": 2.0, "posterior_samples": 1000,
            "batch_size": {"500": 128},
        },
        "hmc": {
            "learning_rate": 0.009, "pretrain_epochs": {"50": 1000, "100": 2000, "500": 3000},
            "n_samples": 200, "step_size": 0.00015, "burn": 50, "leapfrog_steps": 10,
            "tau": 1.0, "inference_samples": 1000, "inference_burn": 50,
            "batch_size": {"500": 128},
        },
        "der": {
            "learning_rate": 0.0003, "epochs": 5000, "lambda": 0.01, "samples": 500, "batch_size": {},
        },
        "hetero_gp": {
            "kernel": "rbf", "inducing": 256, "learning_rate": 0.005, "epochs": 2000,
            "samples": 500, "jitter": 1e-6, "max_jitter": 1e-4,
            "noise_lengthscale": 0.2, "noise_variance": 1.0, "learn_noise_kernel": True, "batch_size": {},
        },
    },
}


# -------------------------
# Typed configuration
# -------------------------

@dataclass(frozen=True)
class GridConfig:
    count: int = 500
    lo: float = 0.01
    hi: float = 0.99


@dataclass(frozen=True)
class ReferenceConfig:
    n_d: int = 20
    n_gamma: int = 10
    learning_rate: float = 0.009
    epochs: Any = 500
    batch_size: Any = field(default_factory=dict)


@dataclass(frozen=True)
class MethodSettings:
    """Hyperparameter block of one method"""

    name: str
    values: Dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def per_size(self, key: str, n: int, fallback: Optional[Any] = None) -> Any:
        return resolve_per_size(self.values.get(key), n, f"methods.{self.name}.{key}", fallback)


@dataclass(frozen=True)
class ExperimentConfig:
    methods: Tuple[str, ...]
    sample_sizes: Tuple[int, ...]
    batch_sizes: Tuple[int, ...]
    run_seeds: Tuple[int, ...]
    dataset_seeds: Tuple[int, ...]
    output_dir: str
    parallelism: int
    region_split: float
    save_weights: bool
    dgp: Dict[str, float]
    grid: GridConfig
    mlp: Dict[str, Any]
    reference: ReferenceConfig
    method_settings: Dict[str, MethodSettings]
    document: Dict[str, Any] = field(repr=False, compare=False, default_factory=dict)

    def batch_size_for(self, n: int) -> int:
        return self.batch_sizes[self.sample_sizes.index(n)]

    def settings(self, method: str) -> MethodSettings:
        return self.method_settings[method]


def resolve_per_size(value: Any, n: int, key_path: str, fallback: Optional[Any] = None) -> Any:
    """Scalar values apply to every size; tables are looked up by str(n), then 'default', then fallback"""
    if not isinstance(value, dict):
        if value is None:
            if fallback is None:
                raise ConfigError(key_path, "missing value")
            return fallback
        return value
    if str(n) in value:
        return value[str(n)]
    if "default" in value:
        return value["default"]
    if fallback is not None:
        return fallback
    raise ConfigError(key_path, f"no entry for sample size {n}")


# -------------------------
# Document handling
# -------------------------

def _check_keys(doc: Dict[str, Any], defaults: Dict[str, Any], path: str = ""):
    for key, value in doc.items():
        key_path = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(key_path, "unknown key")
        expected = defaults[key]
        if key in PER_SIZE_KEYS:
            if isinstance(value, dict):
                for size_key in value:
                    if size_key != "default" and not str(size_key).isdigit():
                        raise ConfigError(f"{key_path}.{size_key}", "per-size keys must be sample sizes or 'default'")
            continue
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(key_path, "expected a table")
            _check_keys(value, expected, key_path)


def _merge(base: Dict[str, Any], doc: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in PER_SIZE_KEYS:
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_literal(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _apply_override(doc: Dict[str, Any], assignment: str):
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key.path=value")
    key_path, raw = assignment.split("=", 1)
    keys = [k.strip() for k in key_path.strip().split(".") if k.strip()]
    if not keys:
        raise ConfigError(assignment, "empty key path")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(key_path, "cannot descend into a non-table value")
    node[keys[-1]] = _parse_literal(raw.strip())


# Lower bounds on numeric settings, by leaf key
MIN_VALUES: Dict[str, float] = {
    "count": 1, "hidden_layers": 1, "hidden_width": 1, "parallelism": 1,
    "n_d": 2, "n_gamma": 2, "ensemble_size": 2,
    "samples": 1, "train_mc": 1, "test_mc": 1, "posterior_samples": 1, "inducing": 1,
    "n_samples": 1, "leapfrog_steps": 1, "inference_samples": 1,
    "burn_in": 0, "burn": 0, "inference_burn": 0, "beta": 0.0, "lambda": 0.0,
}
# Settings that must be strictly positive
POSITIVE_KEYS = {
    "learning_rate", "step_size", "tau", "prior_precision", "noise", "prior_sigma",
    "jitter", "max_jitter", "noise_lengthscale", "noise_variance", "beta_alpha", "beta_beta",
}
ACTIVATION_NAMES = ("relu", "tanh")
GP_KERNELS = ("rbf",)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    return (_is_int(value) or isinstance(value, float)) and math.isfinite(value)


def _type_problem(value: Any, expected: Any) -> Optional[str]:
    if isinstance(expected, bool):
        return None if isinstance(value, bool) else f"must be true or false, got {value!r}"
    if isinstance(expected, int):
        return None if _is_int(value) else f"must be an integer, got {value!r}"
    if isinstance(expected, float):
        return None if _is_real(value) else f"must be a finite number, got {value!r}"
    if isinstance(expected, str):
        return None if isinstance(value, str) else f"must be a string, got {value!r}"
    if isinstance(expected, list):
        if not isinstance(value, list):
            return f"must be a list, got {value!r}"
        for item in value:
            problem = _type_problem(item, expected[0]) if expected else None
            if problem:
                return f"entry {problem}"
    return None


def _leaf_issues(doc: Dict[str, Any], defaults: Dict[str, Any], path: str = "") -> List[Tuple[str, str]]:
    """Type and range of every leaf, judged against the default it replaces"""
    issues: List[Tuple[str, str]] = []
    for key, expected in defaults.items():
        value = doc[key]
        key_path = f"{path}.{key}" if path else key
        if key in PER_SIZE_KEYS:
            entries = value.items() if isinstance(value, dict) else [(None, value)]
            for size_key, entry in entries:
                if not _is_int(entry) or entry < 1:
                    where = key_path if size_key is None else f"{key_path}.{size_key}"
                    issues.append((where, f"must be a positive integer, got {entry!r}"))
            continue
        if isinstance(expected, dict):
            issues.extend(_leaf_issues(value, expected, key_path))
            continue
        problem = _type_problem(value, expected)
        if problem is None and key in MIN_VALUES and value < MIN_VALUES[key]:
            problem = f"must be at least {MIN_VALUES[key]}, got {value!r}"
        if problem is None and key in POSITIVE_KEYS and value <= 0:
            problem = f"must be positive, got {value!r}"
        if problem:
            issues.append((key_path, problem))
    return issues


def validate_config(doc: Dict[str, Any]) -> List[Tuple[str, str]]:
    """Return (key path, problem) pairs for a merged experiment document"""
    issues = _leaf_issues(doc, APPENDIX_DEFAULTS)
    if issues:
        return issues
    exp = doc["experiment"]

    sizes, batches = exp["sample_sizes"], exp["batch_sizes"]
    if len(sizes) != len(batches):
        issues.append(("experiment.batch_sizes", f"has {len(batches)} entries but sample_sizes has {len(sizes)}"))
    if any(n < 1 for n in sizes):
        issues.append(("experiment.sample_sizes", "sizes must be positive integers"))
    if any(b < 1 for b in batches):
        issues.append(("experiment.batch_sizes", "batch sizes must be positive integers"))
    for key in ("sample_sizes", "run_seeds", "dataset_seeds"):
        if len(set(exp[key])) != len(exp[key]):
            issues.append((f"experiment.{key}", "entries must be distinct"))

    unknown = [m for m in exp["methods"] if m not in METHOD_NAMES and m != REFERENCE]
    if unknown:
        issues.append(("experiment.methods", f"unknown methods {unknown}"))
    if not 0.0 < exp["region_split"] < 1.0:
        issues.append(("experiment.region_split", "must be in (0, 1)"))

    grid = doc["test_grid"]
    if not (0.0 < grid["lo"] < grid["hi"] < 1.0):
        issues.append(("test_grid", f"need 0 < lo < hi < 1, got lo={grid['lo']} hi={grid['hi']}"))

    ref = doc["reference"]
    if REFERENCE in exp["methods"] and ref["n_d"] > len(exp["dataset_seeds"]):
        issues.append(("reference.n_d", f"needs {ref['n_d']} dataset seeds, only {len(exp['dataset_seeds'])} configured"))
    if doc["mlp"]["activation"] not in ACTIVATION_NAMES:
        issues.append(("mlp.activation", f"must be one of {ACTIVATION_NAMES}"))

    methods = doc["methods"]
    if not 0.0 < methods["bootstrap_ensemble"]["fraction"] <= 1.0:
        issues.append(("methods.bootstrap_ensemble.fraction", "must be in (0, 1]"))
    if not 0.0 < methods["mc_dropout"]["rate"] < 1.0:
        issues.append(("methods.mc_dropout.rate", "must be in (0, 1)"))
    hmc = methods["hmc"]
    if hmc["n_samples"] <= hmc["burn"]:
        issues.append(("methods.hmc.burn", "must be smaller than n_samples"))
    if hmc["inference_samples"] <= hmc["inference_burn"]:
        issues.append(("methods.hmc.inference_burn", "must be smaller than inference_samples"))
    gp = methods["hetero_gp"]
    if gp["kernel"] not in GP_KERNELS:
        issues.append(("methods.hetero_gp.kernel", f"must be one of {GP_KERNELS}"))
    if gp["jitter"] > gp["max_jitter"]:
        issues.append(("methods.hetero_gp.jitter", "must not exceed max_jitter"))

    # every per-size value must resolve for every configured size
    for name, block in list(methods.items()) + [(REFERENCE, ref)]:
        prefix = "reference" if name == REFERENCE else f"methods.{name}"
        for key in ("epochs", "pretrain_epochs"):
            if key in block:
                for n in sizes:
                    value = block[key]
                    if isinstance(value, dict) and str(n) not in value and "default" not in value:
                        issues.append((f"{prefix}.{key}", f"no entry for sample size {n}"))
    return issues


def parse_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Load an experiment document (TOML), fill missing keys from the appendix
    defaults, apply `key.path=value` overrides and validate the result
    """
    doc: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(str(path), "config file not found")
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(str(path), f"malformed document: {e}") from e
    for assignment in overrides:
        _apply_override(doc, assignment)

    _check_keys(doc, APPENDIX_DEFAULTS)
    merged = _merge(APPENDIX_DEFAULTS, doc)
    issues = validate_config(merged)
    if issues:
        key_path, message = issues[0]
        extra = f" (+{len(issues) - 1} more)" if len(issues) > 1 else ""
        raise ConfigError(key_path, message + extra)

    exp = merged["experiment"]
    return ExperimentConfig(
        methods=tuple(exp["methods"]),
        sample_sizes=tuple(exp["sample_sizes"]),
        batch_sizes=tuple(exp["batch_sizes"]),
        run_seeds=tuple(exp["run_seeds"]),
        dataset_seeds=tuple(exp["dataset_seeds"]),
        output_dir=str(exp["output_dir"]),
        parallelism=int(exp["parallelism"]),
        region_split=float(exp["region_split"]),
        save_weights=bool(exp["save_weights"]),
        dgp=dict(merged["dgp"]),
        grid=GridConfig(**merged["test_grid"]),
        mlp=dict(merged["mlp"]),
        reference=ReferenceConfig(**merged["reference"]),
        method_settings={name: MethodSettings(name, dict(block)) for name, block in merged["methods"].items()},
        document=merged,
    )


def dump_document(doc: Dict[str, Any]) -> str:
    """Serialize a merged experiment document back to TOML (for run snapshots)"""
    lines: List[str] = []

    def literal(value: Any) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, (int, float)):
            return repr(value)
        if isinstance(value, str):
            return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(value, (list, tuple)):
            return "[" + ", ".join(literal(v) for v in value) + "]"
        if isinstance(value, dict):
            return "{ " + ", ".join(f'"{k}" = {literal(v)}' for k, v in value.items()) + " }"
        raise TypeError(f"cannot serialize {type(value).__name__}")

    def table(prefix: str, body: Dict[str, Any]):
        scalars = {k: v for k, v in body.items() if not isinstance(v, dict) or k in PER_SIZE_KEYS}
        tables = {k: v for k, v in body.items() if isinstance(v, dict) and k not in PER_SIZE_KEYS}
        if scalars:
            lines.append(f"[{prefix}]")
            for key, value in scalars.items():
                lines.append(f"{key} = {literal(value)}")
            lines.append("")
        for key, value in tables.items():
            table(f"{prefix}.{key}", value)

    for section, body in doc.items():
        table(section, body)
    return "\n".join(lines)
