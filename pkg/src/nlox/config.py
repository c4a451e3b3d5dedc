"""Experiment configuration files.

An experiment is one TOML file with the sections ``plant``, ``dataset``,
``observer``, ``networks``, ``training``, ``baselines``, ``evaluation``,
``probe`` and ``paths`` plus a top-level ``seed``.  Every key is checked
against the schema below before any work starts; unknown keys are errors.
"""

import hashlib
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from .baselines import BernardConfig, EkfConfig, SmoConfig
from .datagen import InputSignalSpec
from .errors import ConfigError
from .observer import ObserverConfig
from .plants import DisturbanceSpec, make_plant
from .training import GRID_AXES, TrainConfig

PRESETS = ("bioreactor", "bioreactor_noise", "williams_otto", "williams_otto_noise")

_NUMBER = (int, float)

# section -> key -> (accepted types, required)
SCHEMA = {
    "": {"seed": (int, True)},
    "plant": {"name": (str, True), "substeps": (int, False), "params": (dict, False), "disturbance": (dict, False)},
    "plant.disturbance": {
        "kind": (str, True), "mean": (_NUMBER, False), "stddev": (_NUMBER, False), "target_input_index": (int, False),
    },
    "dataset": {
        "M": (int, True), "N": (int, True), "t_s": (_NUMBER, True), "split": (_NUMBER, False), "input": (dict, True),
    },
    "dataset.input": {
        "kind": (str, True), "mu": (list, True), "sigma": (list, True), "hold_intervals": (int, False),
        "convention": (str, False), "clip_quantile": (_NUMBER, False),
    },
    "observer": {"eigenvalues": (list, True), "B": ((str, list), True)},
    "networks": {"omega_hidden": (list, True), "tdagger_hidden": (list, True), "decomposition": (str, False)},
    "training": {
        "epochs": (int, True), "learning_rate": (_NUMBER, True), "rmsprop_decay": (_NUMBER, False),
        "rmsprop_epsilon": (_NUMBER, False), "checkpoint_interval": (int, False), "shuffle": (bool, False),
        "compiled": (bool, False),
    },
    "baselines": {"ekf": (dict, False), "smo": (dict, False), "bernard": (dict, False)},
    "baselines.ekf": {
        "Q": ((list, *_NUMBER), True), "R": ((list, *_NUMBER), True), "P0": ((list, *_NUMBER), True),
        "jacobian": (str, False), "fd_step": (_NUMBER, False), "output_map": (list, False), "substeps": (int, False),
        "stability_target": (_NUMBER, False), "max_substeps": (int, False),
    },
    "baselines.smo": {"gain": (list, True), "epsilon": (_NUMBER, False), "adaptive_rho": (bool, False),
                      "substeps": (int, False)},
    "baselines.bernard": {
        "lambda_stars": (list, False), "panels": (int, False), "nodes_per_panel": (int, False),
        "jacobian_fd_step": (_NUMBER, False), "integrand": (str, False), "substeps": (int, False),
        "stability_target": (_NUMBER, False), "max_substeps": (int, False), "compiled": (bool, False),
    },
    "evaluation": {"observers": (list, False), "timeseries_trajectory": (int, False)},
    "probe": {"t_s_list": (list, False), "substeps": (int, False), "trajectory": (int, False), "samples": (int, False)},
    "grid": {"width": (list, False), "trajectories": (list, False)},
    "paths": {"dataset": (str, False), "run": (str, False)},
}
REQUIRED_SECTIONS = ("plant", "dataset", "observer", "networks", "training")


def _check_section(name, table):
    schema = SCHEMA[name]
    for key, value in table.items():
        if key not in schema:
            where = f"[{name}]" if name else "top level"
            raise ConfigError(f"unknown key {key!r} in {where}")
        types, _ = schema[key]
        if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            raise ConfigError(f"{name}.{key} has the wrong type")
        if not isinstance(value, types):
            raise ConfigError(f"{name}.{key} has type {type(value).__name__}")
        sub = f"{name}.{key}" if name else key
        if sub in SCHEMA and isinstance(value, dict):
            _check_section(sub, value)
    for key, (_, required) in schema.items():
        if required and key not in table:
            raise ConfigError(f"missing required key {key!r} in [{name}]")


def validate(raw):
    """Check a parsed TOML document against the schema."""
    top = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    _check_section("", top)
    for section, table in raw.items():
        if isinstance(table, dict):
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            _check_section(section, table)
    for section in REQUIRED_SECTIONS:
        if section not in raw:
            raise ConfigError(f"missing section [{section}]")


def _matrix(value, n, name):
    if isinstance(value, _NUMBER) and not isinstance(value, bool):
        return float(value) * np.eye(n)
    try:
        M = np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} is not a numeric matrix") from exc
    return M


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    source: bytes
    path: str = ""

    # ---------------------------------------------------------- access
    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def digest(self):
        """Hash of the parsed settings, so overrides change it too."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def section(self, name):
        return self.raw.get(name, {})

    def with_seed(self, seed):
        raw = dict(self.raw, seed=int(seed))
        return replace(self, raw=raw)

    def with_overrides(self, **sections):
        """Copy with some section keys replaced, e.g. ``dataset={"M": 10}``."""
        raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in self.raw.items()}
        for section, values in sections.items():
            if section == "seed":
                raw["seed"] = values
                continue
            raw.setdefault(section, {})
            raw[section] = dict(raw[section], **values)
        validate(raw)
        out = replace(self, raw=raw)
        out.check()
        return out

    # ------------------------------------------------------------ builders
    def plant(self):
        p = self.raw["plant"]
        try:
            return make_plant(p["name"], **p.get("params", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad plant section: {exc}") from exc

    def disturbance(self):
        d = self.raw["plant"].get("disturbance")
        try:
            return DisturbanceSpec(**d) if d else DisturbanceSpec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def substeps(self):
        return self.raw["plant"].get("substeps")

    def input_spec(self):
        i = dict(self.raw["dataset"]["input"])
        i["mu"] = tuple(float(v) for v in i["mu"])
        i["sigma"] = tuple(float(v) for v in i["sigma"])
        try:
            return InputSignalSpec(**i)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def M(self):
        return int(self.raw["dataset"]["M"])

    @property
    def N(self):
        return int(self.raw["dataset"]["N"])

    @property
    def t_s(self):
        return float(self.raw["dataset"]["t_s"])

    @property
    def split(self):
        return float(self.raw["dataset"].get("split", 0.7))

    def observer(self, n_y, n_u):
        o = self.raw["observer"]
        lam = np.asarray(o["eigenvalues"], dtype=float)
        if isinstance(o["B"], str):
            if o["B"] != "ones":
                raise ConfigError("observer.B must be 'ones' or a matrix")
            B = np.ones((lam.size, n_y))
        else:
            B = _matrix(o["B"], lam.size, "observer.B")
        try:
            return ObserverConfig(lam, B, self.t_s, n_u)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self):
        n, t = self.raw["networks"], self.raw["training"]
        try:
            return TrainConfig(
                epochs=t["epochs"],
                learning_rate=float(t["learning_rate"]),
                omega_hidden=tuple(n["omega_hidden"]),
                tdagger_hidden=tuple(n["tdagger_hidden"]),
                decomposition=n.get("decomposition", "single"),
                seed=self.seed,
                checkpoint_interval=t.get("checkpoint_interval", 10),
                rmsprop_decay=float(t.get("rmsprop_decay", 0.9)),
                rmsprop_epsilon=float(t.get("rmsprop_epsilon", 1e-8)),
                shuffle=t.get("shuffle", True),
                compiled=t.get("compiled", True),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def ekf_config(self, plant):
        e = self.section("baselines").get("ekf")
        if e is None:
            return None
        try:
            n_m = len(e["output_map"]) if "output_map" in e else plant.n_y
            return EkfConfig(
                Q=_matrix(e["Q"], plant.n_x, "Q"), R=_matrix(e["R"], n_m, "R"),
                P0=_matrix(e["P0"], plant.n_x, "P0"), jacobian=e.get("jacobian", "numeric"),
                fd_step=float(e.get("fd_step", 1e-6)), output_map=e.get("output_map"),
                substeps=e.get("substeps", 10), stability_target=float(e.get("stability_target", 2.0)),
                max_substeps=e.get("max_substeps", 5000),
            )
        except ValueError as exc:
            raise ConfigError(f"bad EKF section: {exc}") from exc

    def smo_config(self):
        s = self.section("baselines").get("smo")
        if s is None:
            return None
        try:
            return SmoConfig(np.asarray(s["gain"], dtype=float), float(s.get("epsilon", 0.01)),
                             s.get("adaptive_rho", True), s.get("substeps", 10))
        except ValueError as exc:
            raise ConfigError(f"bad SMO section: {exc}") from exc

    def bernard_config(self):
        b = self.section("baselines").get("bernard")
        if b is None:
            return None
        b = dict(b)
        if "lambda_stars" in b:
            b["lambda_stars"] = tuple(float(v) for v in b["lambda_stars"])
        try:
            return BernardConfig(**b)
        except ValueError as exc:
            raise ConfigError(f"bad explicit-KKL section: {exc}") from exc

    def observers_to_evaluate(self):
        return list(self.section("evaluation").get("observers", ["nlox"]))

    def timeseries_trajectory(self):
        return int(self.section("evaluation").get("timeseries_trajectory", 0))

    def probe_settings(self):
        p = self.section("probe")
        return {
            "t_s_list": [float(v) for v in p.get("t_s_list", [0.1, 0.05, 0.025, 0.0125])],
            "substeps": int(p.get("substeps", 32)),
            "trajectory": int(p.get("trajectory", 0)),
            "samples": p.get("samples"),
        }

    def grid_values(self, axis):
        if axis not in GRID_AXES:
            raise ConfigError(f"unknown grid axis {axis!r}")
        values = self.section("grid").get(axis, list(GRID_AXES[axis]))
        if not values:
            raise ConfigError(f"grid axis {axis!r} is empty")
        return [int(v) for v in values]

    def output_path(self, key, default):
        return Path(self.section("paths").get(key, default))

    def check(self):
        """Build every component once so semantic errors surface before work starts."""
        plant = self.plant()
        self.disturbance()
        spec = self.input_spec()
        if spec.n_u != plant.n_u:
            raise ConfigError(f"input spec has {spec.n_u} channels, plant expects {plant.n_u}")
        if self.M < 2 or self.N < 2 or not self.t_s > 0:
            raise ConfigError("dataset needs M >= 2, N >= 2 and t_s > 0")
        if not 0 < self.split < 1:
            raise ConfigError("split must lie in (0, 1)")
        self.observer(plant.n_y, plant.n_u)
        self.train_config()
        self.ekf_config(plant)
        self.smo_config()
        self.bernard_config()
        unknown = set(self.observers_to_evaluate()) - {"nlox", "ekf", "smo", "bernard"}
        if unknown:
            raise ConfigError(f"unknown observers {sorted(unknown)}")
        return self


def parse_config(source, path=""):
    if isinstance(source, str):
        source = source.encode()
    try:
        raw = tomli.loads(source.decode())
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
    validate(raw)
    return ExperimentConfig(raw, source, str(path)).check()


def preset_path(name):
    return resources.files("nlox") / "presets" / f"{name}.toml"


def load_config(path):
    """Read a config file, or a shipped preset when ``path`` names one."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        source = preset_path(str(path)).read_bytes()
        return parse_config(source, f"preset:{path}")
    try:
        source = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(source, path)
