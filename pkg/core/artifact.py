"""
Disentangle - Run Artifacts
Manifest with checksums for every emitted file, and offline verification that
replays the decomposition identities on stored reference grids
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import LEDGER_FILENAME, LOG_DIRNAME, LOG_FILENAME, MANIFEST_FILENAME, PROJECT_NAME
from core.decompose import IDENTITY_RTOL, split_arrays
from core.errors import ArtifactError
from core.report import BREAKDOWN_COLUMNS, breakdown_filename, read_csv, read_reference_grid

logger = logging.getLogger(__name__)

GRID_PATTERN = re.compile(r"reference_grid_(\d+)_(\d+)\.csv$")

# Still written after the manifest, so listed without a checksum
LIVE_FILES = (LEDGER_FILENAME, f"{LOG_DIRNAME}/{LOG_FILENAME}")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunArtifact:
    """Everything a finished run left in its directory"""

    run_dir: Path
    files: List[Path] = field(default_factory=list)
    failures: List[Dict[str, str]] = field(default_factory=list)
    warnings: List[Dict[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / MANIFEST_FILENAME


def write_manifest(artifact: RunArtifact, extra: Optional[Dict[str, Any]] = None) -> Path:
    """List every emitted file with its checksum and size; tracebacks of failed tasks go in too"""
    entries = []
    for path in sorted(set(artifact.files)):
        path = Path(path)
        entries.append({
            "path": path.relative_to(artifact.run_dir).as_posix(),
            "sha256": sha256_file(path),
            "bytes": path.stat().st_size,
            "modified": datetime.fromtimestamp(path.stat().st_mtime, timezone.utc).isoformat(timespec="seconds"),
        })
    live = [{"path": name, "bytes": (artifact.run_dir / name).stat().st_size}
            for name in LIVE_FILES if (artifact.run_dir / name).exists()]
    manifest = {
        "project": PROJECT_NAME,
        "created_at": _timestamp(),
        "files": entries,
        "live_files": live,
        "failures": artifact.failures,
        "warnings": artifact.warnings,
    }
    manifest.update(extra or {})
    artifact.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=False), encoding="utf-8")
    logger.info(f"Manifest written: {len(entries)} files, {len(artifact.failures)} failed tasks")
    return artifact.manifest_path


# -------------------------
# Verification
# -------------------------

@dataclass
class VerificationReport:
    results: List[tuple] = field(default_factory=list)   # (file, passed, reason)

    def add(self, name: str, passed: bool, reason: str = ""):
        self.results.append((name, passed, reason))

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.results)

    def lines(self) -> List[str]:
        return [f"PASS {name}" if passed else f"FAIL {name}: {reason}" for name, passed, reason in self.results]


def _close(a: float, b: float, scale: float) -> bool:
    return abs(a - b) <= IDENTITY_RTOL * max(1.0, abs(scale))


def check_breakdown_rows(rows: Sequence[Dict[str, str]]) -> Optional[str]:
    """procedural + data = total and squared_bias = bias^2 on every stored row"""
    for row in rows:
        try:
            values = {k: float(row[k]) for k in BREAKDOWN_COLUMNS}
        except (KeyError, ValueError) as e:
            return f"malformed row ({e})"
        if not _close(values["procedural"] + values["data"], values["total"], values["total"]):
            return f"procedural + data != total at x={row['x']}"
        if not _close(values["bias"] ** 2, values["squared_bias"], values["squared_bias"]):
            return f"squared_bias != bias^2 at x={row['x']}"
    return None


def check_grid_against_breakdown(grid_path: Path, breakdown_path: Path) -> Optional[str]:
    """Recompute the variance split and the bias identity from the stored grid"""
    xs, means, variances = read_reference_grid(grid_path)
    rows = read_csv(breakdown_path)
    if len(rows) != xs.size:
        return f"{len(rows)} breakdown rows for {xs.size} grid points"
    procedural, data, total = split_arrays(means)
    for i, row in enumerate(rows):
        x = row["x"]
        stored_total = float(row["total"])
        if not (_close(procedural[i], float(row["procedural"]), stored_total)
                and _close(data[i], float(row["data"]), stored_total)
                and _close(total[i], stored_total, stored_total)):
            return f"variance split does not match the grid at x={x}"
        bias = float(row["bias"])
        truth = float(means[i].mean()) - bias
        msd = float(np.mean((truth - means[i]) ** 2))
        if not _close(msd, total[i] + bias * bias, msd):
            return f"mean squared deviation != variance + bias^2 at x={x}"
        if not _close(float(variances[i].mean()), float(row["aleatoric"]), float(row["aleatoric"])):
            return f"aleatoric column does not match the grid at x={x}"
    return None


def verify_artifact(run_dir: Path) -> VerificationReport:
    """Recompute checksums listed in the manifest, then replay the identities on stored grids"""
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_FILENAME
    if not manifest_path.exists():
        raise ArtifactError(f"no {MANIFEST_FILENAME} in {run_dir}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{manifest_path}: corrupt manifest ({e})") from e

    report = VerificationReport()
    present = set()
    for entry in manifest.get("files", []):
        name = entry["path"]
        path = run_dir / name
        if not path.exists():
            report.add(name, False, "missing")
            continue
        present.add(name)
        if sha256_file(path) != entry["sha256"]:
            report.add(name, False, "checksum mismatch")
            continue
        report.add(name, True)

    for entry in manifest.get("live_files", []):
        name = entry["path"]
        report.add(name, (run_dir / name).exists(), "missing")

    for name in sorted(present):
        match = GRID_PATTERN.search(name)
        if name.startswith("breakdown_"):
            reason = check_breakdown_rows(read_csv(run_dir / name))
            report.add(f"{name} [identities]", reason is None, reason or "")
        elif match:
            partner = (Path(name).parent / breakdown_filename(int(match.group(1)), int(match.group(2)))).as_posix()
            if partner not in present:
                report.add(f"{name} [identities]", False, "breakdown file missing")
                continue
            try:
                reason = check_grid_against_breakdown(run_dir / name, run_dir / partner)
            except ArtifactError as e:
                reason = str(e)
            report.add(f"{name} [identities]", reason is None, reason or "")

    for failure in manifest.get("failures", []):
        report.add(f"task {failure.get('task')}", False, "task failed during the run")
    logger.info(f"Verified {run_dir}: {'all pass' if report.ok else 'failures found'}")
    return report
