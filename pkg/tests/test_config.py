try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import pytest

from config import APPENDIX_DEFAULTS, DEFAULT_CONFIG_PATH, METHOD_NAMES, REFERENCE, dump_document, parse_config
from core.errors import ConfigError


def test_empty_document_gives_appendix_defaults(tmp_path):
    path = tmp_path / "empty.toml"
    path.write_text("", encoding="utf-8")
    cfg = parse_config(path)
    assert cfg.sample_sizes == (50, 100, 500)
    assert cfg.batch_sizes == (32, 32, 64)
    assert cfg.run_seeds == (7, 42, 123, 999, 2024)
    assert len(cfg.dataset_seeds) == 20
    assert cfg.methods == METHOD_NAMES + (REFERENCE,)
    assert (cfg.reference.n_d, cfg.reference.n_gamma) == (20, 10)
    assert cfg.settings("der")["lambda"] == 0.01
    assert cfg.document == APPENDIX_DEFAULTS


def test_shipped_config_is_valid():
    cfg = parse_config(DEFAULT_CONFIG_PATH)
    assert cfg.grid.count == 500


def test_sample_sizes_without_batch_sizes_is_an_error():
    with pytest.raises(ConfigError) as err:
        parse_config(None, ["experiment.sample_sizes=[50]"])
    assert err.value.key_path == "experiment.batch_sizes"


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "typo.toml"
    path.write_text("[methods.deep_ensemble]\nlerning_rate = 0.01\n", encoding="utf-8")
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    assert err.value.key_path == "methods.deep_ensemble.lerning_rate"


def test_malformed_and_missing_documents(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_config(bad)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.toml")


@pytest.mark.parametrize("override", [
    "test_grid.lo=0.995",
    "experiment.run_seeds=[1, 1]",
    "experiment.methods=[\"dropout_ensemble\"]",
    "methods.mc_dropout.rate=1.5",
    "experiment.parallelism=0",
])
def test_invariant_violations(override):
    with pytest.raises(ConfigError):
        parse_config(None, [override])


def test_per_size_values():
    cfg = parse_config(None, ["methods.vi.epochs={ \"default\" = 7, \"500\" = 9 }"])
    s = cfg.settings("vi")
    assert s.per_size("epochs", 50) == 7
    assert s.per_size("epochs", 500) == 9
    assert cfg.settings("deep_ensemble").per_size("epochs", 100) == 250
    assert cfg.settings("laplace").per_size("batch_size", 500, fallback=64) == 128
    assert cfg.settings("laplace").per_size("batch_size", 50, fallback=32) == 32


def test_per_size_table_must_cover_every_size():
    with pytest.raises(ConfigError):
        parse_config(None, ["methods.der.epochs={ \"50\" = 10 }"])


def test_snapshot_reparses_to_the_same_document():
    cfg = parse_config(None, ["experiment.parallelism=3", "methods.hmc.tau=2.5"])
    assert tomllib.loads(dump_document(cfg.document)) == cfg.document


@pytest.mark.parametrize("override,key_path", [
    ("test_grid.count=\"x\"", "test_grid.count"),
    ("reference.n_d=\"two\"", "reference.n_d"),
    ("methods.deep_ensemble.ensemble_size=2.5", "methods.deep_ensemble.ensemble_size"),
    ("methods.deep_ensemble.epochs=0", "methods.deep_ensemble.epochs"),
    ("methods.vi.epochs={ \"50\" = 0, \"100\" = 5, \"500\" = 5 }", "methods.vi.epochs.50"),
    ("methods.hmc.step_size=-0.1", "methods.hmc.step_size"),
    ("methods.hetero_gp.learn_noise_kernel=1", "methods.hetero_gp.learn_noise_kernel"),
    ("experiment.run_seeds=[1, \"2\"]", "experiment.run_seeds"),
    ("test_grid.hi=nan", "test_grid.hi"),
])
def test_mistyped_and_out_of_range_values_name_their_key(override, key_path):
    with pytest.raises(ConfigError) as err:
        parse_config(None, [override])
    assert err.value.key_path == key_path


def test_integer_where_a_float_is_expected_is_accepted():
    cfg = parse_config(None, ["methods.hmc.tau=2", "methods.hetero_gp.learn_noise_kernel=false"])
    assert cfg.settings("hmc")["tau"] == 2
    assert cfg.settings("hetero_gp")["learn_noise_kernel"] is False
