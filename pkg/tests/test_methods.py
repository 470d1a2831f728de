import math

import numpy as np
import pytest

from conftest import tiny_config
from core import autodiff as ad
from core.autodiff import Tape, grad_at
from core.errors import ContractViolation
from core.nn import MLP, Batch, TrainConfig, gaussian_batch_loss
from core.rng import RandomStream
from methods import (METHODS, DerConfig, ExactGP, GpConfig, HmcConfig, LaplaceConfig, RbfKernel, ViConfig,
                     bootstrap_indices, fit_bootstrap_ensemble, fit_deep_ensemble, fit_der, fit_hetero_gp,
                     fit_hmc, fit_laplace, fit_mc_dropout, fit_method, fit_vi, hmc_chain, kl_diag_gaussian,
                     laplace_posterior_variance, leapfrog, metropolis_accept, sample_thetas)
from methods.evidential import nig_links_array
from methods.variational import init_variational, vi_batch_loss


def _check_uncertainty(predictor, grid):
    est = predictor.uncertainty(grid)
    for arr in (est.mean, est.aleatoric, est.epistemic):
        assert arr.shape == grid.shape
        assert np.all(np.isfinite(arr))
    assert np.all(est.aleatoric > 0)
    assert np.all(est.epistemic >= 0)
    np.testing.assert_allclose(est.total, est.aleatoric + est.epistemic)
    return est


# -------------------------
# Ensembles
# -------------------------

def test_deep_ensemble_members_differ(small_data, tiny_mlp, tiny_train, grid):
    ens = fit_deep_ensemble(small_data, 3, [1, 2, 3], tiny_mlp, tiny_train)
    means, _ = ens.sample_grid(grid)
    assert means.shape == (3, grid.size)
    assert not np.array_equal(means[0], means[1])
    est = _check_uncertainty(ens, grid)
    assert np.all(est.epistemic > 0)
    with pytest.raises(ContractViolation):
        ens.sample_thetas(0.5, 4)
    assert len(ens.sample_thetas(0.5)) == 3


def test_ensemble_needs_two_members(small_data, tiny_mlp, tiny_train):
    with pytest.raises(ContractViolation):
        fit_deep_ensemble(small_data, 1, [1], tiny_mlp, tiny_train)
    with pytest.raises(ContractViolation):
        fit_deep_ensemble(small_data, 2, [1, 2, 3], tiny_mlp, tiny_train)


def test_bootstrap_indices():
    idx = bootstrap_indices(50, 0.6, member_seed=4, dataset_seed=7)
    assert idx.size == 30
    assert idx.min() >= 0 and idx.max() < 50
    np.testing.assert_array_equal(idx, bootstrap_indices(50, 0.6, member_seed=4, dataset_seed=7))
    assert not np.array_equal(idx, bootstrap_indices(50, 0.6, member_seed=5, dataset_seed=7))
    with pytest.raises(ContractViolation):
        bootstrap_indices(50, 0.0, 1, 1)


def test_bootstrap_ensemble(small_data, tiny_mlp, tiny_train, grid):
    ens = fit_bootstrap_ensemble(small_data, 2, [5, 6], tiny_mlp, tiny_train)
    _check_uncertainty(ens, grid)


def test_identical_member_seeds_carry_no_epistemic_spread(small_data, tiny_mlp, tiny_train, grid):
    ens = fit_deep_ensemble(small_data, 2, [4, 4], tiny_mlp, tiny_train)
    means, _ = ens.sample_grid(grid)
    np.testing.assert_array_equal(means[0], means[1])
    np.testing.assert_allclose(ens.uncertainty(grid).epistemic, 0.0, atol=1e-12)


# -------------------------
# Sampling methods
# -------------------------

def test_mc_dropout(small_data, tiny_mlp, tiny_train, grid):
    with pytest.raises(ContractViolation):
        fit_mc_dropout(small_data, 0.0, tiny_mlp, tiny_train)
    pred = fit_mc_dropout(small_data, 0.2, tiny_mlp, tiny_train, samples=7)
    assert len(pred.sample_thetas(0.4)) == 7
    assert len(pred.sample_thetas(0.4, 3)) == 3
    _check_uncertainty(pred, grid)


def test_kl_of_identical_gaussians_is_zero():
    assert kl_diag_gaussian(np.zeros(4), np.ones(4)) == pytest.approx(0.0)
    # KL(N(1, 1) || N(0, 1)) = 1/2
    assert kl_diag_gaussian(np.array([1.0]), np.array([1.0])) == pytest.approx(0.5)


def test_vi(small_data, tiny_mlp, tiny_train, grid):
    pred = fit_vi(small_data, tiny_mlp, tiny_train, ViConfig(burn_in=1, train_mc=2, test_mc=6, init_rho=-3.0))
    assert pred.sigma.size == len(pred.mean_params)
    assert np.all(pred.sigma > 0)
    est = _check_uncertainty(pred, grid)
    assert np.all(est.epistemic > 0)


def test_vi_sample_count(small_data, tiny_mlp, tiny_train):
    pred = fit_vi(small_data, tiny_mlp, tiny_train, ViConfig(burn_in=0, train_mc=1, test_mc=4))
    assert len(sample_thetas(pred, 0.3)) == 4


def test_vi_loss_without_kl_weight_is_the_plain_nll(small_data, tiny_mlp):
    mlp = MLP(tiny_mlp)
    # softplus(-40) is ~4e-18, so every sampled weight equals its mean
    variational = init_variational(mlp, RandomStream(3), init_rho=-40.0)
    point = mlp.init_params(RandomStream(3))
    batch = Batch(small_data.xs, small_data.ys, RandomStream(9), epoch=5, num_batches=3)

    def value(loss, params):
        return grad_at(params, lambda tape, P: loss(tape, P, batch))[0]

    plain = value(gaussian_batch_loss(mlp), point)
    no_kl = value(vi_batch_loss(mlp, ViConfig(burn_in=0, beta=0.0, train_mc=1)), variational)
    assert no_kl == pytest.approx(plain, rel=1e-9)
    in_burn_in = value(vi_batch_loss(mlp, ViConfig(burn_in=5, beta=1.0, train_mc=1)), variational)
    assert in_burn_in == pytest.approx(plain, rel=1e-9)
    weighted = value(vi_batch_loss(mlp, ViConfig(burn_in=0, beta=1.0, train_mc=1)), variational)
    assert weighted > plain


# -------------------------
# Laplace
# -------------------------

def test_laplace_matches_conjugate_linear_regression():
    # orthogonal design columns give a diagonal conjugate posterior
    X = np.array([[1.0, 1.0], [1.0, -1.0], [2.0, 2.0], [2.0, -2.0]])
    noise, prior = 0.7, 1.5
    tape = Tape()
    w = tape.parameter(np.zeros((2, 1)), "w")
    out = tape.constant(X) @ w
    ggn = ad.hessian_diag_ggn(tape, [(out, np.full(4, 1.0 / noise ** 2))])["w"][:, 0]
    approx = laplace_posterior_variance(ggn, prior)
    exact = np.linalg.inv(X.T @ X / noise ** 2 + prior * np.eye(2))
    np.testing.assert_allclose(approx, np.diag(exact), atol=1e-6)
    assert abs(exact[0, 1]) < 1e-12


def test_laplace(small_data, tiny_mlp, tiny_train, grid):
    pred = fit_laplace(small_data, tiny_mlp, tiny_train, LaplaceConfig(posterior_samples=6))
    assert pred.ggn_diag.shape == (len(pred.model.params),)
    assert np.all(pred.ggn_diag >= 0)
    assert np.all(pred.posterior_std <= 1.0)
    _check_uncertainty(pred, grid)
    tighter = pred.with_prior_precision(100.0)
    assert np.all(tighter.posterior_std < pred.posterior_std)


# -------------------------
# HMC
# -------------------------

def _gaussian_potential(q):
    return 0.5 * float(q @ q), q.copy()


def test_metropolis_rule():
    assert metropolis_accept(-1.0, 0.999)
    assert not metropolis_accept(math.inf, 0.0)
    assert not metropolis_accept(math.nan, 0.0)
    assert metropolis_accept(math.log(2.0), 0.49)
    assert not metropolis_accept(math.log(2.0), 0.51)


@pytest.mark.parametrize("u", [0.0, 0.5, 0.999999])
def test_energy_preserving_step_is_always_accepted(u):
    assert metropolis_accept(0.0, u)


def test_leapfrog_energy_drift_is_small():
    q0 = np.array([1.0, 0.5])
    p0 = np.array([0.3, -0.2])
    U0, g0 = _gaussian_potential(q0)
    q, p, U, _ = leapfrog(q0, p0, g0, _gaussian_potential, 0.005, 10)
    assert abs((U + 0.5 * p @ p) - (U0 + 0.5 * p0 @ p0)) < 1e-4
    assert not np.array_equal(q, q0)


def test_hmc_samples_standard_gaussian():
    chain = hmc_chain(_gaussian_potential, np.array([2.0, -2.0]), n_samples=5500, step_size=0.15,
                      leapfrog_steps=10, stream=RandomStream(11), burn=500)
    assert chain.samples.shape == (5000, 2)
    assert np.all(np.abs(chain.samples.mean(axis=0)) < 0.05)
    assert np.all(np.abs(chain.samples.var(axis=0) - 1.0) < 0.1)
    assert chain.accept_rate > 0.9


def test_hmc_config_validation():
    with pytest.raises(ContractViolation):
        HmcConfig(n_samples=10, burn=10)
    with pytest.raises(ContractViolation):
        HmcConfig(inference_samples=5, inference_burn=5)


def test_hmc_network(small_data, tiny_mlp, grid):
    cfg = HmcConfig(n_samples=5, burn=1, step_size=1e-4, leapfrog_steps=2, inference_samples=6, inference_burn=1)
    pred = fit_hmc(small_data, tiny_mlp, TrainConfig(0.01, 3, 8, seed=2), cfg)
    assert pred.chain.samples.shape[0] == 4
    assert pred.default_samples == 5
    _check_uncertainty(pred, grid)


# -------------------------
# DER
# -------------------------

def test_der_reports_closed_form(small_data, tiny_mlp, tiny_train, grid):
    pred = fit_der(small_data, tiny_mlp, tiny_train, DerConfig(samples=8))
    est = _check_uncertainty(pred, grid)
    nig = pred.predict_nig(float(grid[3]))
    assert est.aleatoric[3] == pytest.approx(nig.beta / (nig.alpha - 1.0))
    assert est.aleatoric[3] / est.epistemic[3] == pytest.approx(nig.nu)
    assert nig.alpha > 1 and nig.nu > 0 and nig.beta > 0
    means, variances = pred.sample_grid(grid)
    assert means.shape == variances.shape == (8, grid.size)



def test_nig_links_stay_in_range_for_extreme_outputs():
    raw = {key: np.array([-1e3, 0.0, 1e3]) for key in ("gamma", "nu", "alpha", "beta")}
    gamma, nu, alpha, beta = nig_links_array(raw)
    for arr in (gamma, nu, alpha, beta):
        assert np.all(np.isfinite(arr))
    assert np.all(nu > 0) and np.all(alpha > 1) and np.all(beta > 0)
    np.testing.assert_array_equal(gamma, raw["gamma"])

# -------------------------
# Gaussian processes
# -------------------------

def test_exact_gp_interpolates_noiseless_data():
    xs = np.linspace(0.05, 0.95, 6)
    ys = np.sin(4.0 * xs)
    gp = ExactGP(RbfKernel(0.2, 1.0), noise=0.0).fit(xs, ys)
    mean, var = gp.predict(xs)
    np.testing.assert_allclose(mean, ys, atol=1e-6)
    assert np.all(var < 1e-6)


def test_exact_gp_marginal_likelihood_prefers_fitted_hyperparameters():
    stream = RandomStream(8)
    xs = np.sort(stream.uniform(0.0, 1.0, 30))
    ys = np.sin(6.0 * xs) + 0.1 * stream.normal(size=30)
    fitted = ExactGP.optimise(xs, ys)
    rough = ExactGP(RbfKernel(0.005, 1.0), 0.5).fit(xs, ys)
    assert fitted.log_marginal_likelihood() > rough.log_marginal_likelihood()


def test_hetero_gp(small_data, tiny_train, grid):
    pred = fit_hetero_gp(small_data, tiny_train, GpConfig(inducing=8, samples=6))
    assert pred.posterior.inducing.size == 8
    _check_uncertainty(pred, grid)


def test_hetero_gp_learns_noise_hyperparameters(small_data, tiny_train):
    init = GpConfig(inducing=8, samples=6)
    learned = fit_hetero_gp(small_data, tiny_train, init).posterior
    assert learned.noise_kernel != RbfKernel(init.noise_lengthscale, init.noise_variance)
    assert learned.noise_scale != 1.0

    fixed = fit_hetero_gp(small_data, tiny_train, GpConfig(inducing=8, samples=6, learn_noise_kernel=False)).posterior
    assert fixed.noise_kernel == RbfKernel(init.noise_lengthscale, init.noise_variance)
    assert fixed.noise_scale == 1.0


def test_hetero_gp_members_are_joint_draws(small_data, tiny_train):
    pred = fit_hetero_gp(small_data, tiny_train, GpConfig(inducing=8, samples=6))
    xs = np.array([0.5, 0.5 + 1e-6, 0.9])
    means, variances = pred.sample_grid(xs, 400)
    np.testing.assert_allclose(means[:, 0], means[:, 1], atol=1e-4)
    np.testing.assert_allclose(variances[:, 0], variances[:, 1], rtol=1e-3)
    assert not np.allclose(means[:, 0], means[:, 2])


def test_hetero_gp_member_spread_matches_marginal_moments(small_data, tiny_train, grid):
    pred = fit_hetero_gp(small_data, tiny_train, GpConfig(inducing=8, samples=6))
    means, _ = pred.sample_grid(grid, 4000)
    moments = pred.posterior.moments(grid)
    np.testing.assert_allclose(means.mean(axis=0), moments["mean_f"], atol=4.0 * np.sqrt(moments["var_f"].max() / 4000))
    np.testing.assert_allclose(means.var(axis=0), moments["var_f"], rtol=0.2)


def test_gp_config_validation():
    with pytest.raises(ContractViolation):
        GpConfig(kernel="matern")
    with pytest.raises(ContractViolation):
        GpConfig(jitter=1e-3, max_jitter=1e-4)


# -------------------------
# Registry
# -------------------------

def test_registry_covers_all_methods():
    assert set(METHODS) == {"deep_ensemble", "bootstrap_ensemble", "mc_dropout", "vi", "laplace", "hmc",
                            "der", "hetero_gp"}


@pytest.mark.parametrize("name", sorted(METHODS))
def test_fit_method_from_config(tmp_path, small_data, grid, name):
    cfg = tiny_config(tmp_path)
    pred = fit_method(name, small_data, cfg, seed=3)
    assert pred.name == name
    _check_uncertainty(pred, grid)


def test_unknown_method(tmp_path, small_data):
    with pytest.raises(ContractViolation):
        fit_method("dropout_ensemble", small_data, tiny_config(tmp_path), seed=1)
