import numpy as np
import pytest

import core.decompose as decompose
from core.decompose import (EpistemicBreakdown, NigParams, ReferenceGrid, SecondOrderSample, bias_terms,
                            der_decomposition, estimate_reference, split_arrays, total_variance_split,
                            variance_decomposition)
from core.dgp import DgpSpec
from core.errors import ContractViolation, HarnessError, NumericError, TrainingError
from core.nn import MlpConfig, TrainConfig
from core.rng import RandomStream


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_mixture_identity_on_random_samples():
    stream = RandomStream(1)
    for _ in range(1000):
        d = int(stream.integers(1, 40))
        means = stream.normal(0.0, stream.uniform(0.01, 2.0), d)
        variances = stream.uniform(0.1, 3.0, d)
        sample = SecondOrderSample.from_arrays(means, variances, 0.5)
        est = variance_decomposition(sample)
        assert _rel(est.aleatoric + est.epistemic, sample.mixture_variance()) < 1e-12


def test_single_member_has_zero_epistemic():
    est = variance_decomposition(SecondOrderSample.from_arrays(np.array([0.3]), np.array([0.2]), 0.1))
    assert est.epistemic == 0.0
    assert est.aleatoric == pytest.approx(0.2)


def test_empty_sample_is_rejected():
    with pytest.raises(ContractViolation):
        SecondOrderSample((), 0.5)


def test_total_variance_split_on_random_grids():
    stream = RandomStream(2)
    for _ in range(1000):
        n_d, n_g = int(stream.integers(2, 12)), int(stream.integers(2, 12))
        means = stream.normal(size=(n_d, n_g)) * stream.uniform(0.01, 3.0)
        grid = ReferenceGrid(0.4, means, np.ones((n_d, n_g)))
        split = total_variance_split(grid)
        assert _rel(split.procedural + split.data, split.total) < 1e-9


def test_bias_identity_on_random_grids():
    stream = RandomStream(3)
    for _ in range(1000):
        means = stream.normal(size=(5, 4)) + stream.normal()
        truth = float(stream.normal(0.0, 2.0))
        b = bias_terms(ReferenceGrid(0.3, means, np.ones((5, 4))), truth)
        msd = float(np.mean((truth - means) ** 2))
        assert _rel(msd, b.total + b.squared_bias) < 1e-9
        assert b.squared_bias == pytest.approx(b.bias ** 2)


def test_constant_rows_put_everything_into_data_variance():
    means = np.array([[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]])
    split = total_variance_split(ReferenceGrid(0.5, means, np.ones((2, 3))))
    assert split.procedural == 0.0
    assert split.data == pytest.approx(1.0)
    assert split.total == pytest.approx(1.0)


def test_split_arrays_is_vectorised_over_query_points():
    means = RandomStream(4).normal(size=(7, 3, 5))
    procedural, data, total = split_arrays(means)
    assert procedural.shape == (7,)
    for i in range(7):
        single = total_variance_split(ReferenceGrid(0.0, means[i], np.ones((3, 5))))
        assert procedural[i] == pytest.approx(single.procedural)
        assert data[i] == pytest.approx(single.data)


def test_grid_contracts():
    with pytest.raises(ContractViolation):
        ReferenceGrid(0.1, np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ContractViolation):
        ReferenceGrid(0.1, np.array([[1.0, np.nan]]), np.ones((1, 2)))
    with pytest.raises(ContractViolation):
        total_variance_split(ReferenceGrid(0.1, np.ones((1, 3)), np.ones((1, 3))))
    with pytest.raises(NumericError):
        EpistemicBreakdown(procedural=1.0, data=1.0, total=3.0)


def test_der_closed_form():
    est = der_decomposition(NigParams(gamma=0.0, nu=1.0, alpha=3.0, beta=2.0))
    assert est.aleatoric == 1.0
    assert est.epistemic == 1.0


def test_der_ratio_equals_nu():
    stream = RandomStream(5)
    for _ in range(1000):
        p = NigParams(float(stream.normal()), float(stream.uniform(0.01, 50.0)),
                      float(stream.uniform(1.01, 20.0)), float(stream.uniform(0.01, 10.0)))
        est = der_decomposition(p)
        assert est.aleatoric / est.epistemic == pytest.approx(p.nu, rel=1e-12)


def test_nig_parameter_ranges():
    with pytest.raises(ContractViolation):
        NigParams(0.0, 1.0, 1.0, 1.0)
    with pytest.raises(ContractViolation):
        NigParams(0.0, 0.0, 2.0, 1.0)


class _StubModel:
    def __init__(self, seed):
        self.seed = seed

    def predict_batch(self, xs):
        return np.full(xs.size, (self.seed % 101) / 101.0), np.full(xs.size, 0.5)


def _stub_trainer(fail_label=None, error=None):
    def train(data, mcfg, tcfg, label=""):
        if fail_label is not None and fail_label in label:
            raise error or TrainingError(1, "forced")
        return _StubModel(tcfg.seed)

    return train


def _reference(n_d, n_g):
    return estimate_reference(DgpSpec(), 20, n_d, n_g, TrainConfig(0.01, 1, 8, seed=7),
                              np.linspace(0.1, 0.9, 5), list(range(100, 100 + n_d)), MlpConfig(1, 4))


def test_reference_breakdown_identities(monkeypatch):
    monkeypatch.setattr(decompose, "train_mlp", _stub_trainer())
    result = _reference(3, 4)
    assert result.means.shape == (5, 3, 4)
    cols = result.arrays()
    np.testing.assert_allclose(cols["procedural"] + cols["data"], cols["total"], rtol=1e-9)
    np.testing.assert_allclose(cols["aleatoric"], 0.5)
    assert result.kept_rows == [0, 1, 2]


def test_reference_drops_rows_with_failed_cells(monkeypatch):
    monkeypatch.setattr(decompose, "train_mlp", _stub_trainer("d=3,g=0"))
    result = _reference(10, 2)
    assert result.kept_rows == [0, 1, 2, 4, 5, 6, 7, 8, 9]
    assert result.means.shape[1] == 9
    assert [(d, g) for d, g, _ in result.failures] == [(3, 0)]


def test_reference_fails_below_completion_threshold(monkeypatch):
    monkeypatch.setattr(decompose, "train_mlp", _stub_trainer("d=1,"))
    with pytest.raises(HarnessError):
        _reference(3, 2)


def test_reference_seeds_are_reproducible(monkeypatch):
    monkeypatch.setattr(decompose, "train_mlp", _stub_trainer())
    np.testing.assert_array_equal(_reference(2, 3).means, _reference(2, 3).means)


def test_unexpected_cell_error_is_recorded_not_raised(monkeypatch):
    monkeypatch.setattr(decompose, "train_mlp", _stub_trainer("d=2,g=1", FloatingPointError("overflow in exp")))
    result = _reference(10, 2)
    assert 2 not in result.kept_rows
    assert [(d, g) for d, g, _ in result.failures] == [(2, 1)]
    assert "FloatingPointError" in result.failures[0][2]
