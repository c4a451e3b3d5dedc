import numpy as np
import pytest

from nlox.config import PRESETS, load_config, parse_config
from nlox.errors import ConfigError

MINIMAL = """
seed = 3

[plant]
name = "bioreactor"

[dataset]
M = 4
N = 20
t_s = 0.1

[dataset.input]
kind = "lognormal_per_step"
mu = [0.4]
sigma = [0.2]

[observer]
eigenvalues = [3.0, 6.0]
B = "ones"

[networks]
omega_hidden = [4]
tdagger_hidden = [4]

[training]
epochs = 1
learning_rate = 1e-3
"""


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load(name):
    cfg = load_config(name)
    plant = cfg.plant()
    assert cfg.t_s == 0.1
    assert cfg.observer(plant.n_y, plant.n_u).n_y == plant.n_y


def test_preset_settings():
    bio = load_config("bioreactor")
    assert (bio.M, bio.N, bio.train_config().epochs, bio.train_config().learning_rate) == (300, 1000, 200, 1e-5)
    assert bio.train_config().omega_hidden == (48, 48, 48)
    wo = load_config("williams_otto")
    assert wo.train_config().omega_hidden[0] == 64 and wo.train_config().learning_rate == 1e-6
    assert wo.observer(6, 2).n_z == 14
    assert wo.train_config().decomposition == "per_state"


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.split == 0.7
    assert cfg.observers_to_evaluate() == ["nlox"]
    assert cfg.probe_settings()["t_s_list"] == [0.1, 0.05, 0.025, 0.0125]


def test_scalar_weights_become_identity():
    cfg = load_config("bioreactor")
    ekf = cfg.ekf_config(cfg.plant())
    np.testing.assert_array_equal(ekf.P0, np.eye(2))


@pytest.mark.parametrize("edit", [
    ("seed = 3", "seed = 3\nbogus = 1"),
    ("[training]", "[training]\nmomentum = 0.9"),
    ("epochs = 1", "epochs = 1.5"),
    ("M = 4", "M = 1"),
    ('name = "bioreactor"', 'name = "reactor"'),
    ("eigenvalues = [3.0, 6.0]", "eigenvalues = [3.0, -6.0]"),
    ("mu = [0.4]", "mu = [0.4, 0.4]"),
    ("t_s = 0.1", "t_s = 0.1\nsplit = 1.0"),
    ("[networks]", "[networks]\ndecomposition = \"pairs\""),
])
def test_schema_errors(edit):
    with pytest.raises(ConfigError):
        parse_config(MINIMAL.replace(*edit))


def test_missing_section():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL.replace("[training]\nepochs = 1\nlearning_rate = 1e-3\n", ""))


def test_bad_toml():
    with pytest.raises(ConfigError):
        parse_config("seed = ")


def test_unknown_observer():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + '\n[evaluation]\nobservers = ["nlox", "ukf"]\n')


def test_empty_grid_axis():
    cfg = parse_config(MINIMAL + "\n[grid]\nwidth = []\n")
    with pytest.raises(ConfigError):
        cfg.grid_values("width")


def test_overrides_change_digest():
    cfg = parse_config(MINIMAL)
    other = cfg.with_overrides(dataset={"M": 6})
    assert other.M == 6 and cfg.M == 4
    assert other.digest != cfg.digest
    assert cfg.with_seed(3).digest == cfg.digest


def test_source_kept_byte_exact():
    assert parse_config(MINIMAL).source == MINIMAL.encode()


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/experiment.toml")
