import hashlib
import json

import numpy as np
import pytest

import harness
from config import parse_config
from conftest import tiny_config
from core.artifact import verify_artifact
from core.database import TaskLedger
from core.errors import MethodError
from core.report import read_csv
from harness import Harness, Task, procedural_seed
from main import main


def _csv_digests(run_dir):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(run_dir.glob("*.csv"))}


def test_minimal_run_emits_table_figures_and_reference(tmp_path):
    run_dir = tmp_path / "run"
    cfg = tiny_config(run_dir, 'experiment.methods=["deep_ensemble", "reference"]')
    artifact = Harness(cfg, run_dir).run()

    assert artifact.ok
    rows = read_csv(run_dir / "table1.csv")
    assert [(r["method"], r["N"]) for r in rows] == [("deep_ensemble", "24"), ("reference", "24")]
    for name in ("figure_deep_ensemble_24.csv", "figure_reference_24.csv", "regions.csv",
                 "reference_grid_24_7.csv", "breakdown_24_7.csv", "config_snapshot.toml"):
        assert (run_dir / name).exists(), name
    assert (run_dir / "logs" / "harness.log").exists()
    assert verify_artifact(run_dir).ok

    ledger = TaskLedger(run_dir)
    assert {t["key"] for t in ledger.tasks("finished")} == {"deep_ensemble/24/7", "reference/24/7"}


def test_identical_config_gives_identical_csvs(tmp_path):
    digests = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        cfg = tiny_config(run_dir, 'experiment.methods=["mc_dropout", "der", "reference"]')
        Harness(cfg, run_dir).run()
        digests.append(_csv_digests(run_dir))
    assert digests[0] == digests[1]
    assert "table1.csv" in digests[0]


def test_parallel_run_matches_serial(tmp_path):
    methods = 'experiment.methods=["deep_ensemble", "vi", "reference"]'
    serial = tmp_path / "serial"
    parallel = tmp_path / "parallel"
    Harness(tiny_config(serial, methods), serial).run()
    Harness(tiny_config(parallel, methods, "experiment.parallelism=2"), parallel).run()
    assert _csv_digests(serial) == _csv_digests(parallel)


def test_failed_task_is_recorded_without_stopping_others(tmp_path, monkeypatch):
    real_fit = harness.fit_method

    def flaky(name, data, cfg, seed):
        if name == "der":
            raise MethodError("der", "boom")
        return real_fit(name, data, cfg, seed)

    monkeypatch.setattr(harness, "fit_method", flaky)
    run_dir = tmp_path / "run"
    artifact = Harness(tiny_config(run_dir, 'experiment.methods=["deep_ensemble", "der"]'), run_dir).run()

    assert not artifact.ok
    assert [f["task"] for f in artifact.failures] == ["der/24/7"]
    assert "boom" in artifact.failures[0]["traceback"]
    assert [r["method"] for r in read_csv(run_dir / "table1.csv")] == ["deep_ensemble"]
    assert [t["key"] for t in TaskLedger(run_dir).tasks("failed")] == ["der/24/7"]
    assert not verify_artifact(run_dir).ok


def test_tasks_are_ordered_like_the_table(tmp_path):
    cfg = tiny_config(tmp_path, 'experiment.methods=["reference", "hmc", "deep_ensemble"]',
                      "experiment.run_seeds=[42, 7]")
    keys = [t.key for t in Harness(cfg, tmp_path / "run").tasks()]
    assert keys == ["deep_ensemble/24/7", "deep_ensemble/24/42", "hmc/24/7", "hmc/24/42",
                    "reference/24/7", "reference/24/42"]


def test_procedural_seeds_are_disjoint_per_method():
    assert procedural_seed(Task("vi", 50, 7)) != procedural_seed(Task("der", 50, 7))
    assert procedural_seed(Task("vi", 50, 7)) != procedural_seed(Task("vi", 100, 7))
    assert procedural_seed(Task("vi", 50, 7)) == procedural_seed(Task("vi", 50, 7))


def test_save_weights(tmp_path):
    run_dir = tmp_path / "run"
    cfg = tiny_config(run_dir, 'experiment.methods=["deep_ensemble", "laplace"]', "experiment.save_weights=true")
    artifact = Harness(cfg, run_dir).run()
    assert (run_dir / "weights" / "deep_ensemble_24_7" / "member_01.npz").exists()
    assert (run_dir / "weights" / "laplace_24_7" / "ggn_diag.npy").exists()
    assert verify_artifact(artifact.run_dir).ok


# -------------------------
# Command line
# -------------------------

def test_cli_config_error_exit_code():
    assert main(["run", "--set", "experiment.sample_sizes=[50]"]) == 2
    assert main(["run", "--set", "methods.vi.lerning_rate=0.1"]) == 2
    assert main(["run", "--set", 'test_grid.count="x"']) == 2


def test_cli_verify_and_decompose(tmp_path, capsys):
    run_dir = tmp_path / "run"
    Harness(tiny_config(run_dir, 'experiment.methods=["deep_ensemble", "reference"]'), run_dir).run()
    capsys.readouterr()

    assert main(["verify", str(run_dir)]) == 0
    assert all(line.startswith("PASS") for line in capsys.readouterr().out.splitlines())

    breakdown = run_dir / "breakdown_24_7.csv"
    before = breakdown.read_bytes()
    assert main(["decompose", "--grid", str(run_dir / "reference_grid_24_7.csv")]) == 0
    assert breakdown.read_bytes() == before

    figure = run_dir / "figure_deep_ensemble_24.csv"
    figure.write_text(figure.read_text(encoding="utf-8") + "0.5,0,0,0,0,0\n", encoding="utf-8")
    assert main(["verify", str(run_dir)]) == 1
    assert "FAIL figure_deep_ensemble_24.csv: checksum mismatch" in capsys.readouterr().out


def test_cli_verify_without_manifest(tmp_path):
    assert main(["verify", str(tmp_path)]) == 1


def test_manifest_lists_live_files_and_verify_notices_them_missing(tmp_path):
    run_dir = tmp_path / "run"
    Harness(tiny_config(run_dir, 'experiment.methods=["deep_ensemble"]'), run_dir).run()
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    assert [entry["path"] for entry in manifest["live_files"]] == ["tasks.db", "logs/harness.log"]
    assert verify_artifact(run_dir).ok

    (run_dir / "tasks.db").unlink()
    report = verify_artifact(run_dir)
    assert not report.ok
    assert "FAIL tasks.db: missing" in report.lines()


@pytest.mark.slow
def test_reference_epistemic_shrinks_with_more_data(tmp_path):
    run_dir = tmp_path / "reference"
    cfg = tiny_config(run_dir, 'experiment.methods=["reference"]', "experiment.sample_sizes=[50, 100, 500]",
                      "experiment.batch_sizes=[32, 32, 64]", "mlp.hidden_layers=2", "mlp.hidden_width=32",
                      "reference.n_d=5", "reference.n_gamma=3", "reference.epochs=150", "test_grid.count=100")
    Harness(cfg, run_dir).run_reference()
    totals = []
    for n in (50, 100, 500):
        rows = read_csv(run_dir / f"breakdown_{n}_7.csv")
        totals.append(np.mean([float(r["total"]) for r in rows]))
    assert totals[0] > totals[1] > totals[2]


@pytest.mark.slow
def test_deep_ensemble_bias_exceeds_epistemic(tmp_path):
    run_dir = tmp_path / "ensemble"
    cfg = tiny_config(run_dir, 'experiment.methods=["deep_ensemble"]', "experiment.sample_sizes=[500]",
                      "experiment.batch_sizes=[64]", "mlp.hidden_layers=4", "mlp.hidden_width=100",
                      "methods.deep_ensemble.ensemble_size=10", "methods.deep_ensemble.epochs=500",
                      "test_grid.count=500")
    Harness(cfg, run_dir).run()
    row = read_csv(run_dir / "table1.csv")[0]
    assert float(row["bias_mean"]) >= 5.0 * float(row["epistemic_mean"])
    left = [r for r in read_csv(run_dir / "regions.csv") if r["region"] == "left"][0]
    assert float(left["aleatoric"]) >= 2.0 * float(left["true_sigma2"])


def _default_config(run_dir, *extra):
    return parse_config(None, [f'experiment.output_dir="{run_dir.as_posix()}"'] + list(extra))


@pytest.mark.slow
def test_reference_row_at_500_matches_expected_magnitudes(tmp_path):
    run_dir = tmp_path / "reference-500"
    cfg = _default_config(run_dir, 'experiment.methods=["reference"]', "experiment.sample_sizes=[500]",
                          "experiment.batch_sizes=[64]")
    assert len(cfg.run_seeds) == 5
    Harness(cfg, run_dir).run()
    row = read_csv(run_dir / "table1.csv")[0]
    assert row["method"] == "reference"
    assert float(row["aleatoric_mean"]) == pytest.approx(1.04, rel=0.3)
    assert 0.013 / 3.0 <= float(row["epistemic_mean"]) <= 0.013 * 3.0
    assert 0.044 / 2.0 <= float(row["bias_mean"]) <= 0.044 * 2.0


@pytest.mark.slow
def test_evidential_sigma_distance_exceeds_deep_ensemble_at_100(tmp_path):
    run_dir = tmp_path / "der-vs-ensemble"
    cfg = _default_config(run_dir, 'experiment.methods=["deep_ensemble", "der"]', "experiment.sample_sizes=[100]",
                          "experiment.batch_sizes=[32]")
    Harness(cfg, run_dir).run()
    rows = {r["method"]: r for r in read_csv(run_dir / "table1.csv")}
    assert float(rows["der"]["sigma_dist_mean"]) > float(rows["deep_ensemble"]["sigma_dist_mean"])
