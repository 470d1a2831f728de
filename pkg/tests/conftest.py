import numpy as np
import pytest

from config import parse_config
from core.dgp import DgpSpec, generate_dataset
from core.nn import MlpConfig, TrainConfig

TINY_OVERRIDES = [
    "experiment.sample_sizes=[24]",
    "experiment.batch_sizes=[8]",
    "experiment.run_seeds=[7]",
    "mlp.hidden_layers=1",
    "mlp.hidden_width=8",
    "test_grid.count=20",
    "reference.n_d=2",
    "reference.n_gamma=2",
    "reference.epochs=2",
    "methods.deep_ensemble.ensemble_size=2",
    "methods.deep_ensemble.epochs=2",
    "methods.bootstrap_ensemble.ensemble_size=2",
    "methods.bootstrap_ensemble.epochs=2",
    "methods.mc_dropout.epochs=2",
    "methods.mc_dropout.samples=5",
    "methods.vi.epochs=3",
    "methods.vi.burn_in=1",
    "methods.vi.train_mc=1",
    "methods.vi.test_mc=5",
    "methods.laplace.epochs=2",
    "methods.laplace.posterior_samples=5",
    "methods.hmc.pretrain_epochs=2",
    "methods.hmc.n_samples=4",
    "methods.hmc.burn=1",
    "methods.hmc.leapfrog_steps=2",
    "methods.hmc.inference_samples=6",
    "methods.hmc.inference_burn=1",
    "methods.der.epochs=2",
    "methods.der.samples=5",
    "methods.hetero_gp.epochs=2",
    "methods.hetero_gp.inducing=8",
    "methods.hetero_gp.samples=5",
]


def tiny_config(tmp_path, *extra):
    return parse_config(None, TINY_OVERRIDES + [f'experiment.output_dir="{tmp_path.as_posix()}"'] + list(extra))


@pytest.fixture
def spec():
    return DgpSpec()


@pytest.fixture
def small_data(spec):
    return generate_dataset(spec, 24, seed=7)


@pytest.fixture
def tiny_mlp():
    return MlpConfig(hidden_layers=1, hidden_width=8)


@pytest.fixture
def tiny_train():
    return TrainConfig(learning_rate=0.01, epochs=3, batch_size=8, seed=11)


@pytest.fixture
def grid():
    return np.linspace(0.01, 0.99, 15)


@pytest.fixture
def run_dir(tmp_path):
    path = tmp_path / "run"
    path.mkdir()
    return path
