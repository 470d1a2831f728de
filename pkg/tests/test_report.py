import numpy as np
import pytest

from core.dgp import DgpSpec
from core.errors import ContractViolation, ReportingError
from core.report import (FIGURE_COLUMNS, TABLE_COLUMNS, FigureSeries, RunMetrics, aggregate_runs, compute_run_metrics,
                         emit_outputs, read_csv, read_reference_grid, region_metrics, write_figure,
                         write_reference_grid, write_table)

SPEC = DgpSpec()


def test_perfect_prediction_has_zero_bias_and_sigma_distance(grid):
    m = compute_run_metrics("deep_ensemble", 50, 7, grid, SPEC.mean(grid), SPEC.variance(grid),
                            np.full(grid.size, 0.01), SPEC)
    assert m.bias == pytest.approx(0.0, abs=1e-15)
    assert m.sigma_dist == pytest.approx(0.0, abs=1e-15)
    assert m.epistemic == pytest.approx(0.01)
    assert m.aleatoric == pytest.approx(float(np.mean(SPEC.variance(grid))))


def test_bias_is_mean_absolute_error(grid):
    m = compute_run_metrics("vi", 50, 7, grid, SPEC.mean(grid) + 0.3, SPEC.variance(grid), np.zeros(grid.size), SPEC)
    assert m.bias == pytest.approx(0.3)


def test_non_finite_predictions_name_the_point(grid):
    mean = SPEC.mean(grid).copy()
    mean[4] = np.nan
    with pytest.raises(ReportingError) as err:
        compute_run_metrics("der", 50, 7, grid, mean, np.ones(grid.size), np.ones(grid.size), SPEC)
    assert err.value.x == pytest.approx(grid[4])


def test_empty_grid_is_rejected():
    with pytest.raises(ContractViolation):
        compute_run_metrics("der", 50, 7, np.array([]), np.array([]), np.array([]), np.array([]), SPEC)


def _metrics(method, N, seed, value):
    return RunMetrics(method, N, seed, value, value / 10, value / 5, value / 2)


def test_aggregation_uses_sample_std_and_table_order():
    runs = [_metrics("reference", 50, 1, 1.0), _metrics("deep_ensemble", 100, 1, 2.0),
            _metrics("deep_ensemble", 50, 2, 3.0), _metrics("deep_ensemble", 50, 1, 1.0)]
    rows = aggregate_runs(runs)
    assert [(r.method, r.N) for r in rows] == [("deep_ensemble", 50), ("deep_ensemble", 100), ("reference", 50)]
    assert rows[0].means["aleatoric"] == pytest.approx(2.0)
    assert rows[0].stds["aleatoric"] == pytest.approx(np.std([1.0, 3.0], ddof=1))
    assert rows[1].single_run and rows[1].stds["aleatoric"] == 0.0


def test_region_split(grid):
    regions = region_metrics("laplace", 50, 7, grid, SPEC.mean(grid), SPEC.variance(grid), np.zeros(grid.size),
                             SPEC, split=0.2)
    assert [r.region for r in regions] == ["left", "right"]
    assert regions[0].true_sigma2 == pytest.approx(float(np.mean(SPEC.variance(grid[grid < 0.2]))))


def test_figure_series_bands(grid):
    series = FigureSeries.build(grid, SPEC.mean(grid), np.full(grid.size, 0.04), np.zeros(grid.size), SPEC)
    np.testing.assert_allclose(series.alea_halfwidth, 1.96 * 0.2)
    with pytest.raises(ContractViolation):
        FigureSeries(grid, grid[:3], grid, grid, grid, grid)


def test_emit_outputs_writes_tables_and_figures(run_dir, grid):
    metrics = [_metrics("deep_ensemble", 50, 7, 1.0), _metrics("reference", 50, 7, 2.0)]
    figures = {("deep_ensemble", 50): FigureSeries.build(grid, SPEC.mean(grid), np.ones(grid.size),
                                                         np.zeros(grid.size), SPEC)}
    paths = emit_outputs(metrics, figures, run_dir, regions=[])
    assert sorted(p.name for p in paths) == ["figure_deep_ensemble_50.csv", "regions.csv", "table1.csv"]

    table = (run_dir / "table1.csv").read_text(encoding="utf-8")
    assert table.splitlines()[0] == ",".join(TABLE_COLUMNS)
    assert "\r" not in table
    rows = read_csv(run_dir / "table1.csv")
    assert [r["method"] for r in rows] == ["deep_ensemble", "reference"]
    assert float(rows[1]["aleatoric_mean"]) == 2.0

    figure = read_csv(run_dir / "figure_deep_ensemble_50.csv")
    assert list(figure[0]) == FIGURE_COLUMNS
    assert len(figure) == grid.size


def test_table_and_figure_values_survive_a_write_read_cycle(run_dir, grid):
    runs = [_metrics("vi", 100, 1, 1.0 / 3.0), _metrics("vi", 100, 2, 0.1 + 0.2)]
    rows = aggregate_runs(runs)
    write_table(rows, run_dir / "table1.csv")
    got = read_csv(run_dir / "table1.csv")[0]
    assert (got["method"], got["N"]) == ("vi", "100")
    for column in TABLE_COLUMNS[2:]:
        metric, stat = column.rsplit("_", 1)
        expected = rows[0].means[metric] if stat == "mean" else rows[0].stds[metric]
        assert float(got[column]) == expected, column

    series = FigureSeries.build(grid, SPEC.mean(grid), SPEC.variance(grid), np.full(grid.size, 1e-3), SPEC)
    write_figure(series, run_dir / "figure_vi_100.csv")
    figure = read_csv(run_dir / "figure_vi_100.csv")
    for name, column in zip(("xs",) + tuple(FIGURE_COLUMNS[1:]), FIGURE_COLUMNS):
        np.testing.assert_array_equal([float(r[column]) for r in figure], getattr(series, name))


def test_reference_grid_file(run_dir):
    xs = np.array([0.1, 0.5])
    means = np.arange(12.0).reshape(2, 3, 2) / 7.0
    variances = np.ones((2, 3, 2)) / 3.0
    path = write_reference_grid(xs, means, variances, run_dir / "reference_grid_50_7.csv")
    got_xs, got_means, got_vars = read_reference_grid(path)
    np.testing.assert_array_equal(got_xs, xs)
    np.testing.assert_array_equal(got_means, means)
    np.testing.assert_array_equal(got_vars, variances)
