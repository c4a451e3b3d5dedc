"""Command-line entry point: ``nlox generate | train | evaluate | compare | probe | gridsearch``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O error.  Every output directory receives a byte-exact copy of the
configuration file as ``config.toml``.
"""

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, load_config
from .datagen import build_dataset, directory_digest, load_dataset, save_dataset
from .errors import ConfigError, ModelFileError, NumericalError
from .evaluation import (
    BernardObserver, EkfObserver, NloxObserver, SmoObserver, compare_report, discretization_probe,
    evaluate_observer, sample_estimate_init, write_probe, write_report,
)
from .neural import init_params
from .observer import zero_omega
from .training import NloxModel, grid_search, train, write_grid_results

log = logging.getLogger("nlox")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
CONFIG_COPY = "config.toml"
RUN_MANIFEST = "run.json"


class ArtifactExistsError(OSError):
    pass


def _say(text):
    print(text, flush=True)


# ------------------------------------------------------------- helpers


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _freeze(cfg, directory):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CONFIG_COPY).write_bytes(cfg.source)


def _dataset_dir(args, cfg):
    return Path(args.dataset) if getattr(args, "dataset", None) else cfg.output_path("dataset", f"data/{cfg.plant().name}")


def _run_dir(args, cfg):
    return Path(args.run) if getattr(args, "run", None) else cfg.output_path("run", f"runs/{cfg.plant().name}")


def _clear(directory, patterns):
    for pattern in patterns:
        for path in directory.glob(pattern):
            if path.is_dir():
                shutil.rmtree(path)
            else:
                path.unlink()


def _load_data(directory, cfg):
    train_set, test_set, normalizer, manifest = load_dataset(directory)
    plant = cfg.plant()
    if manifest["plant"] != plant.name:
        raise ConfigError(f"dataset {directory} holds {manifest['plant']!r}, config names {plant.name!r}")
    if abs(manifest["t_s"] - cfg.t_s) > 1e-12:
        raise ConfigError(f"dataset sampled at t_s={manifest['t_s']}, config says {cfg.t_s}")
    return train_set, test_set, normalizer, manifest


def _load_model(run_dir, cfg, plant):
    if not (run_dir / "omega.model").exists():
        raise ModelFileError(f"no trained model in {run_dir}; run `nlox train` first or pass --run")
    observer = cfg.observer(plant.n_y, plant.n_u)
    decomposition = cfg.train_config().decomposition
    return NloxModel.load(run_dir, observer, plant.state_names, decomposition)


# ------------------------------------------------------------ commands


def cmd_generate(args):
    cfg = _config(args)
    out = _dataset_dir(args, cfg)
    if (out / "manifest.json").exists():
        if not args.force:
            raise ArtifactExistsError(f"dataset already exists in {out}; pass --force to regenerate")
        _clear(out, ["traj_*.csv", "manifest.json", CONFIG_COPY])
    plant = cfg.plant()
    train_set, test_set, normalizer = build_dataset(
        plant, cfg.M, cfg.N, cfg.input_spec(), cfg.seed, cfg.t_s, cfg.split, cfg.substeps(), cfg.disturbance(),
    )
    save_dataset(out, plant, train_set, test_set, normalizer,
                 meta={"seed": cfg.seed, "config_digest": cfg.digest})
    _freeze(cfg, out)
    _say(f"wrote {len(train_set)} training and {len(test_set)} test trajectories to {out}")
    _say(f"digest {directory_digest(out)}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    data_dir = _dataset_dir(args, cfg)
    run_dir = _run_dir(args, cfg)
    train_set, test_set, normalizer, manifest = _load_data(data_dir, cfg)
    if (run_dir / RUN_MANIFEST).exists() and not (args.force or args.resume):
        raise ArtifactExistsError(f"run already exists in {run_dir}; pass --resume or --force")
    if args.force and not args.resume:
        _clear(run_dir, ["checkpoints", "best", "*.model", "*.csv", RUN_MANIFEST, CONFIG_COPY])
    plant = cfg.plant()
    observer = cfg.observer(plant.n_y, plant.n_u)
    config = cfg.train_config()
    _freeze(cfg, run_dir)
    _, report = train(config, train_set, test_set, observer, normalizer, run_dir=run_dir, resume=args.resume,
                      state_names=plant.state_names, progress=_say)
    record = {
        "plant": plant.name,
        "seed": cfg.seed,
        "config_digest": cfg.digest,
        "dataset_digest": directory_digest(data_dir),
        "epochs": report.epochs,
        "best_epoch": report.best_epoch,
        "rejected_updates": report.rejected_updates,
        "final_test_rmse": report.test_rmse[-1] if report.test_rmse else None,
    }
    with open(run_dir / RUN_MANIFEST, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _say(f"trained {report.epochs} epochs; models in {run_dir}")
    return EXIT_OK


def _observers(names, cfg, plant, run_dir):
    made = []
    for name in names:
        if name == "nlox":
            made.append(NloxObserver(_load_model(run_dir, cfg, plant)))
        elif name == "ekf":
            ekf = cfg.ekf_config(plant)
            if ekf is None:
                raise ConfigError("observer 'ekf' requested but [baselines.ekf] is missing")
            made.append(EkfObserver(plant, ekf))
        elif name == "smo":
            smo = cfg.smo_config()
            if smo is None:
                raise ConfigError("observer 'smo' requested but [baselines.smo] is missing")
            made.append(SmoObserver(plant, smo))
        elif name == "bernard":
            bernard = cfg.bernard_config()
            if bernard is None or plant.name != "bioreactor":
                raise ConfigError("observer 'bernard' needs the bioreactor and a [baselines.bernard] section")
            made.append(BernardObserver(plant, bernard))
        else:
            raise ConfigError(f"unknown observer {name!r}")
    return made


def cmd_evaluate(args):
    cfg = _config(args)
    data_dir = _dataset_dir(args, cfg)
    run_dir = _run_dir(args, cfg)
    out = run_dir / "eval"
    if (out / "compare.csv").exists() and not args.force:
        raise ArtifactExistsError(f"evaluation already exists in {out}; pass --force to redo it")
    _, test_set, normalizer, _ = _load_data(data_dir, cfg)
    plant = cfg.plant()
    names = args.observers.split(",") if args.observers else cfg.observers_to_evaluate()
    observers = _observers(names, cfg, plant, run_dir)
    x0_hat = sample_estimate_init(plant, len(test_set), cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    _freeze(cfg, out)
    reports = []
    for obs in observers:
        report = evaluate_observer(obs, test_set, normalizer, x0_hat if obs.model_based else None,
                                   plant.state_names, cfg.seed, cfg.digest)
        write_report(report, out)
        reports.append(report)
        if "z_bound" in report.info:
            ratio = np.max(report.info["max_z_norm"] / report.info["z_bound"])
            _say(f"{obs.name}: max ||z|| / ultimate bound = {ratio:.3g}")
        if report.diverged:
            _say(f"{obs.name}: diverged on {report.diverged_count} of {len(test_set)} test trajectories")
    trajectory = min(cfg.timeseries_trajectory(), len(test_set) - 1)
    compare_report(reports, out, trajectory)
    _print_table(out / "compare.csv")
    return EXIT_OK


def _print_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    keys = [k for k in rows[0] if k == "observer" or (k.startswith("rmse_") or k == "rsse")]
    _say("  ".join(f"{k:>12s}" for k in keys))
    for r in rows:
        cells = [r[k] if k == "observer" else f"{float(r[k]):.4g}" for k in keys]
        _say("  ".join(f"{c:>12s}" for c in cells))


def cmd_compare(args):
    cfg = _config(args)
    path = _run_dir(args, cfg) / "eval" / "compare.csv"
    if not path.exists():
        raise ModelFileError(f"no comparison table at {path}; run `nlox evaluate` first")
    _print_table(path)
    return EXIT_OK


def cmd_probe(args):
    cfg = _config(args)
    data_dir = _dataset_dir(args, cfg)
    run_dir = _run_dir(args, cfg)
    _, test_set, _, _ = _load_data(data_dir, cfg)
    plant = cfg.plant()
    settings = cfg.probe_settings()
    observer = cfg.observer(plant.n_y, plant.n_u)
    if args.stub == "zero":
        omega = zero_omega(observer)
    elif args.stub == "random":
        net = init_params([observer.n_z, 8, observer.n_z * observer.n_u], cfg.seed)
        omega = NloxModel(observer, net, []).omega_fn()
    else:
        omega = _load_model(run_dir, cfg, plant).omega_fn()
    k = min(settings["trajectory"], len(test_set) - 1)
    n = settings["samples"] or test_set.n_samples
    result = discretization_probe(observer, omega, test_set.outputs[k, :n], test_set.inputs[k, :n],
                                  settings["t_s_list"], settings["substeps"])
    out = run_dir / "probe"
    out.mkdir(parents=True, exist_ok=True)
    _freeze(cfg, out)
    write_probe(result, out)
    for t, e in zip(result.t_s, result.errors):
        _say(f"t_s {t:.5g}  max error {e:.4e}")
    _say(f"slope {result.slope:.4f}")
    return EXIT_OK


class GridCell:
    """Picklable grid cell: train one configuration and score it on its test split."""

    def __init__(self, raw_source, seed, axis, data_dir):
        self.raw_source = raw_source
        self.seed = seed
        self.axis = axis
        self.data_dir = data_dir

    def __call__(self, value):
        from .config import parse_config

        cfg = parse_config(self.raw_source).with_seed(self.seed)
        plant = cfg.plant()
        if self.axis == "width":
            hidden = [value] * len(cfg.raw["networks"]["omega_hidden"])
            cfg = cfg.with_overrides(networks={"omega_hidden": hidden, "tdagger_hidden": hidden})
            train_set, test_set, normalizer, _ = _load_data(Path(self.data_dir), cfg)
        else:
            cfg = cfg.with_overrides(dataset={"M": value})
            train_set, test_set, normalizer = build_dataset(
                plant, cfg.M, cfg.N, cfg.input_spec(), cfg.seed, cfg.t_s, cfg.split, cfg.substeps(),
                cfg.disturbance(),
            )
        observer = cfg.observer(plant.n_y, plant.n_u)
        _, report = train(cfg.train_config(), train_set, test_set, observer, normalizer,
                          state_names=plant.state_names)
        rmse = report.test_rmse[-1]
        row = {f"rmse_{s}": float(v) for s, v in zip(plant.state_names, rmse)}
        row["rsse"] = float(np.sqrt(np.sum(np.square(rmse))))
        row["train_seconds"] = float(np.sum(report.wall_clock))
        row["final_loss"] = report.train_loss[-1] if report.train_loss else float("nan")
        return row


def cmd_gridsearch(args):
    cfg = _config(args)
    values = cfg.grid_values(args.axis)
    out = _run_dir(args, cfg) / f"grid_{args.axis}"
    if (out / "grid_results.csv").exists() and not args.force:
        raise ArtifactExistsError(f"grid results already exist in {out}; pass --force to redo them")
    data_dir = _dataset_dir(args, cfg)
    if args.axis == "width":
        _load_data(data_dir, cfg)
    cell = GridCell(cfg.source, cfg.seed, args.axis, str(data_dir))
    rows = grid_search(cell, args.axis, values, jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    _freeze(cfg, out)
    write_grid_results(out / "grid_results.csv", rows)
    for r in rows:
        _say(f"{args.axis}={r['value']}: " + (f"rsse {r['rsse']:.4g}" if r["status"] == "ok" else r["status"]))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="nlox", description="Neural KKL observers with external inputs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, run=True):
        p.add_argument("--config", required=True, help=f"TOML file or preset name ({', '.join(PRESETS)})")
        p.add_argument("--seed", type=int, help="override the config seed")
        if dataset:
            p.add_argument("--dataset", help="dataset directory (default: paths.dataset)")
        if run:
            p.add_argument("--run", help="run directory (default: paths.run)")

    p = sub.add_parser("generate", help="simulate and store a dataset")
    common(p, run=False)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the observer networks")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--force", action="store_true", help="discard an existing run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score observers on the test split")
    common(p)
    p.add_argument("--observers", help="comma-separated subset of nlox,ekf,smo,bernard")
    p.add_argument("--force", action="store_true", help="overwrite an existing evaluation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="print the comparison table of an evaluation")
    common(p, dataset=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("probe", help="measure the Euler discretization error of the observer")
    common(p)
    p.add_argument("--stub", choices=("zero", "random"), help="probe a stub input term instead of a trained one")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gridsearch", help="sweep network width or number of trajectories")
    common(p)
    p.add_argument("--axis", required=True, choices=("width", "trajectories"))
    p.add_argument("--jobs", type=int, default=1, help="parallel grid cells (default 1)")
    p.add_argument("--force", action="store_true", help="overwrite existing grid results")
    p.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
