import csv
import re

import numpy as np
import pytest

from nlox import cli
from nlox.errors import DivergenceError

TINY = """
seed = 7

[plant]
name = "bioreactor"

[plant.params]
nominal_dilution = 0.4

[dataset]
M = 4
N = 30
t_s = 0.1

[dataset.input]
kind = "lognormal_per_step"
mu = [0.4]
sigma = [0.2]
convention = "moments"

[observer]
eigenvalues = [3.0, 6.0]
B = "ones"

[networks]
omega_hidden = [4, 4]
tdagger_hidden = [4, 4]

[training]
epochs = 2
learning_rate = 1e-3
checkpoint_interval = 1

[baselines.ekf]
Q = 1.0
R = 1.0
P0 = 1.0

[baselines.smo]
gain = [[2.0], [2.0]]

[evaluation]
observers = ["nlox", "ekf", "smo"]

[probe]
samples = 20

[grid]
width = [4]
"""


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / "tiny.toml"
    config.write_text(TINY)

    def run(command, *extra):
        argv = [command, "--config", str(config)]
        if command != "compare":
            argv += ["--dataset", str(tmp_path / "data")]
        if command != "generate":
            argv += ["--run", str(tmp_path / "run")]
        return cli.main(argv + list(extra))

    return tmp_path, run


def digest_line(text):
    return re.search(r"digest ([0-9a-f]+)", text).group(1)


def test_full_pipeline(workspace, capsys):
    root, run = workspace
    assert run("generate") == 0
    first = digest_line(capsys.readouterr().out)
    assert (root / "data" / "config.toml").read_text() == TINY

    assert run("train") == 0
    out = capsys.readouterr().out
    assert "epoch" in out and (root / "run" / "omega.model").exists()
    assert (root / "run" / "loss_history.csv").exists()

    assert run("evaluate") == 0
    with open(root / "run" / "eval" / "compare.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["observer"] for r in rows] == ["nlox", "ekf", "smo"]
    assert [r["model_based"] for r in rows] == ["False", "True", "True"]
    assert (root / "run" / "eval" / "timeseries_x1.csv").exists()

    assert run("compare") == 0
    assert "ekf" in capsys.readouterr().out

    assert run("probe") == 0
    assert "slope" in capsys.readouterr().out
    assert (root / "run" / "probe" / "probe.csv").exists()

    assert run("generate", "--force") == 0
    assert digest_line(capsys.readouterr().out) == first


def test_single_observer_table(workspace):
    root, run = workspace
    run("generate")
    run("train")
    assert run("evaluate", "--observers", "nlox") == 0
    with open(root / "run" / "eval" / "compare.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 1


def test_train_is_byte_reproducible(workspace):
    root, run = workspace
    run("generate")
    run("train")
    first = {p.name: p.read_bytes() for p in (root / "run").glob("*.model")}
    assert run("train", "--force") == 0
    second = {p.name: p.read_bytes() for p in (root / "run").glob("*.model")}
    assert first == second and first


def test_resume_continues(workspace, capsys):
    root, run = workspace
    run("generate")
    run("train")
    assert run("train", "--resume") == 0
    assert (root / "run" / "checkpoints").exists()


def test_refuses_to_overwrite(workspace, capsys):
    _, run = workspace
    run("generate")
    assert run("generate") == cli.EXIT_IO
    run("train")
    assert run("train") == cli.EXIT_IO
    assert "--force" in capsys.readouterr().err


def test_probe_zero_stub(workspace, capsys):
    root, run = workspace
    run("generate")
    capsys.readouterr()
    assert run("probe", "--stub", "zero") == 0
    out = capsys.readouterr().out
    errors = [float(v) for v in re.findall(r"max error (\S+)", out)]
    assert len(errors) == 4
    # y drives z, so only the input term vanishes; the linear part still has Euler error
    assert all(np.isfinite(errors))


def test_missing_model_is_io_error(workspace, capsys):
    _, run = workspace
    run("generate")
    assert run("evaluate", "--observers", "nlox") == cli.EXIT_IO
    assert "nlox train" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY.replace("[training]", "[training]\nmomentum = 0.9"))
    assert cli.main(["generate", "--config", str(bad), "--dataset", str(tmp_path / "d")]) == cli.EXIT_CONFIG
    assert "momentum" in capsys.readouterr().err


def test_unknown_observer_is_config_error(workspace):
    _, run = workspace
    run("generate")
    assert run("evaluate", "--observers", "ukf") == cli.EXIT_CONFIG


def test_bernard_refused_without_section(workspace):
    _, run = workspace
    run("generate")
    run("train")
    assert run("evaluate", "--observers", "bernard") == cli.EXIT_CONFIG


def test_divergence_exit_code(workspace, monkeypatch):
    _, run = workspace
    run("generate")

    def boom(*args, **kwargs):
        raise DivergenceError("observer state left the bound")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train") == cli.EXIT_DIVERGENCE


def test_gridsearch_width(workspace, capsys):
    root, run = workspace
    run("generate")
    assert run("gridsearch", "--axis", "width") == 0
    with open(root / "run" / "grid_width" / "grid_results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["status"] == "ok"


def test_seed_override_changes_dataset(workspace, capsys):
    root, run = workspace
    run("generate")
    first = digest_line(capsys.readouterr().out)
    assert run("generate", "--force", "--seed", "8") == 0
    assert digest_line(capsys.readouterr().out) != first


def test_parser_rejects_unknown_axis():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["gridsearch", "--config", "x", "--axis", "depth"])
