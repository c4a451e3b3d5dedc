"""Excitation signals, trajectory simulation and dataset assembly.

A dataset is a stack of ``M`` sampled trajectories of inputs, states and
outputs, shifted to deviation variables and min-max scaled with constants
fitted on the training portion only.  On disk a dataset is a directory of
CSV files (one per trajectory and signal group) plus ``manifest.json``.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .errors import DomainError, ModelFileError
from .numerics import integrate_interval_checked
from .plants import DisturbanceSpec, apply_disturbance

log = logging.getLogger(__name__)

# named substreams of the experiment seed
STREAM_DATASET = 0
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_ORDER = 3
STREAM_EVAL = 4

FORMAT = "%.17g"
MANIFEST_VERSION = 1


def substream(seed, *key):
    """Independent generator for the named substream ``key`` of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class InputSignalSpec:
    """Random staircase excitation.

    ``lognormal_per_step`` draws ``exp(N(mu, sigma))`` when ``convention`` is
    ``"underlying"``; with ``"moments"`` the pair is read as the lognormal's
    own mean and standard deviation.  ``gaussian_held`` draws ``N(mu, sigma)``.
    Draws are clipped at the ``clip_quantile`` of the channel distribution
    (upper tail only for lognormal, both tails for Gaussian).
    """

    kind: str
    mu: tuple
    sigma: tuple
    hold_intervals: int = 1
    convention: str = "underlying"
    clip_quantile: Optional[float] = 0.999

    def __post_init__(self):
        if self.kind not in ("lognormal_per_step", "gaussian_held"):
            raise ValueError(f"unknown input signal kind {self.kind!r}")
        if self.convention not in ("underlying", "moments"):
            raise ValueError(f"unknown lognormal convention {self.convention!r}")
        if self.hold_intervals < 1:
            raise ValueError("hold_intervals must be >= 1")
        if len(self.mu) != len(self.sigma):
            raise ValueError("mu and sigma need one entry per channel")
        if any(s < 0 for s in self.sigma):
            raise ValueError("sigma must be >= 0")

    @property
    def n_u(self):
        return len(self.mu)

    def log_params(self):
        """Parameters of the underlying normal for the lognormal kind."""
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if self.convention == "underlying":
            return mu, sigma
        var = np.log1p((sigma / mu) ** 2)
        return np.log(mu) - 0.5 * var, np.sqrt(var)

    def bounds(self):
        """Per-channel amplitude bounds ``(low, high)`` applied by clipping."""
        q = self.clip_quantile
        n = self.n_u
        if q is None:
            return np.full(n, -np.inf), np.full(n, np.inf)
        z = stats.norm.ppf(q)
        if self.kind == "lognormal_per_step":
            m, s = self.log_params()
            return np.zeros(n), np.exp(m + z * s)
        m = np.asarray(self.mu, dtype=float)
        s = np.asarray(self.sigma, dtype=float)
        return m - z * s, m + z * s


def generate_input_sequence(spec, N, rng):
    """Draw an ``(N, n_u)`` staircase that changes every ``hold_intervals`` rows."""
    if N < 1:
        raise ValueError("N must be >= 1")
    levels = -(-N // spec.hold_intervals)
    if spec.kind == "lognormal_per_step":
        m, s = spec.log_params()
        draws = np.exp(m + s * rng.standard_normal((levels, spec.n_u)))
    else:
        m = np.asarray(spec.mu, dtype=float)
        s = np.asarray(spec.sigma, dtype=float)
        draws = m + s * rng.standard_normal((levels, spec.n_u))
    low, high = spec.bounds()
    clipped = np.clip(draws, low, high)
    if np.any(clipped != draws):
        log.debug("input amplitude clip triggered on %d draws", int(np.sum(clipped != draws)))
    return np.repeat(clipped, spec.hold_intervals, axis=0)[:N]


@dataclass
class Trajectory:
    inputs: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    t_s: float
    seed: Optional[int] = None

    def __post_init__(self):
        n = self.states.shape[0]
        if self.inputs.shape[0] != n or self.outputs.shape[0] != n:
            raise ValueError("inputs, states and outputs must have equal row counts")

    def __len__(self):
        return self.states.shape[0]


def simulate_trajectory(plant, x0, inputs, t_s, substeps=None, disturbance=None):
    """Sample the plant under a staircase input.

    ``x0`` may be ``(n_x,)`` or a batch ``(B, n_x)`` with ``inputs`` shaped
    ``(N, n_u)`` or ``(B, N, n_u)``; the batch is integrated in lockstep.
    ``disturbance`` is an additive array shaped like ``inputs`` that the
    plant sees but that is not recorded.  Each sample interval starts
    from ``substeps`` RK4 steps and is refined by step doubling where the
    plant is too stiff for them.
    """
    substeps = plant.default_substeps if substeps is None else substeps
    inputs = np.asarray(inputs, dtype=float)
    x = np.array(x0, dtype=float)
    applied = inputs if disturbance is None else inputs + disturbance
    N = inputs.shape[-2]
    states = np.empty(inputs.shape[:-1] + (plant.n_x,))
    for k in range(N):
        if not np.all(plant.in_domain(x)):
            raise DomainError(f"{plant.name} state left its domain at sample {k}", index=k)
        states[..., k, :] = x
        if k + 1 < N:
            u = applied[..., k, :]
            x = integrate_interval_checked(lambda s, t, u=u: plant.rhs(s, u), x, k * t_s, (k + 1) * t_s, substeps)
    outputs = plant.eval_h(states)
    if states.ndim == 2:
        return Trajectory(inputs.copy(), states, outputs, t_s)
    return states, outputs


def sample_initial_state(plant, rng):
    return np.asarray(plant.sample_initial_state(rng), dtype=float)


# ----------------------------------------------------------------- scaling


GROUPS = ("x", "y", "u")


@dataclass
class Normalizer:
    """Deviation shift followed by per-component min-max scaling.

    Components whose fitted range is empty pass through with unit scale.
    """

    offset: dict
    low: dict
    high: dict

    def _scale(self, group):
        span = self.high[group] - self.low[group]
        return np.where(span > 0, span, 1.0)

    def apply(self, group, v):
        return (np.asarray(v, dtype=float) - self.offset[group] - self.low[group]) / self._scale(group)

    def invert(self, group, v):
        return np.asarray(v, dtype=float) * self._scale(group) + self.low[group] + self.offset[group]

    def to_deviation(self, group, v_normalized):
        """Map normalized values into deviation-variable units."""
        return np.asarray(v_normalized, dtype=float) * self._scale(group) + self.low[group]

    def scale(self, group):
        return self._scale(group).copy()

    @classmethod
    def fit(cls, offsets, **data):
        low, high = {}, {}
        for g in GROUPS:
            dev = np.asarray(data[g], dtype=float) - offsets[g]
            flat = dev.reshape(-1, dev.shape[-1])
            low[g] = flat.min(axis=0)
            high[g] = flat.max(axis=0)
        return cls({g: np.asarray(offsets[g], dtype=float) for g in GROUPS}, low, high)

    def to_dict(self):
        return {
            key: {g: [float(v) for v in getattr(self, key)[g]] for g in GROUPS}
            for key in ("offset", "low", "high")
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*({g: np.array(d[key][g], dtype=float) for g in GROUPS} for key in ("offset", "low", "high")))


@dataclass
class TrajectoryDataset:
    """``M`` trajectories stacked as ``(M, N, dim)`` arrays."""

    inputs: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    t_s: float
    indices: list = field(default_factory=list)
    normalized: bool = True

    def __len__(self):
        return self.states.shape[0]

    @property
    def n_samples(self):
        return self.states.shape[1]

    def trajectory(self, i):
        idx = self.indices[i] if self.indices else None
        return Trajectory(self.inputs[i], self.states[i], self.outputs[i], self.t_s, idx)

    def subset(self, rows):
        rows = list(rows)
        return TrajectoryDataset(
            self.inputs[rows], self.states[rows], self.outputs[rows], self.t_s,
            [self.indices[r] for r in rows] if self.indices else [], self.normalized,
        )

    def normalize(self, normalizer):
        return TrajectoryDataset(
            normalizer.apply("u", self.inputs), normalizer.apply("x", self.states),
            normalizer.apply("y", self.outputs), self.t_s, list(self.indices), True,
        )

    def denormalize(self, normalizer):
        return TrajectoryDataset(
            normalizer.invert("u", self.inputs), normalizer.invert("x", self.states),
            normalizer.invert("y", self.outputs), self.t_s, list(self.indices), False,
        )


def deviation_offsets(plant):
    x_eq = plant.equilibrium()
    return {"x": x_eq, "y": plant.eval_h(x_eq), "u": np.asarray(plant.nominal_input, dtype=float)}


def simulate_raw(plant, M, N, input_spec, seed, t_s, substeps=None, disturbance=DisturbanceSpec()):
    """Simulate ``M`` trajectories; returns raw ``(inputs, states, outputs)`` stacks.

    Trajectory ``i`` draws its initial state, inputs and disturbance from its
    own substream of ``seed`` so any subset can be regenerated alone.
    """
    X0, U, D = [], [], []
    for i in range(M):
        rng_x0, rng_u, rng_d = (
            np.random.default_rng(s) for s in np.random.SeedSequence(int(seed), spawn_key=(STREAM_DATASET, i)).spawn(3)
        )
        X0.append(sample_initial_state(plant, rng_x0))
        u = generate_input_sequence(input_spec, N, rng_u)
        U.append(u)
        D.append(apply_disturbance(u, disturbance, rng_d) - u)
    U = np.stack(U)
    disturbance_arr = np.stack(D) if disturbance.kind != "none" else None
    states, outputs = simulate_trajectory(plant, np.stack(X0), U, t_s, substeps, disturbance_arr)
    return U, states, outputs


def split_indices(M, ratio, seed):
    if M < 2:
        raise ValueError("need at least two trajectories to split")
    n_train = min(max(int(round(ratio * M)), 1), M - 1)
    perm = substream(seed, STREAM_SPLIT).permutation(M)
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def build_dataset(plant, M, N, input_spec, seed, t_s, split=0.7, substeps=None, disturbance=DisturbanceSpec()):
    """Simulate, split and normalize.

    Returns ``(train, test, normalizer)``; both portions are normalized with
    constants fitted on the training trajectories.
    """
    U, X, Y = simulate_raw(plant, M, N, input_spec, seed, t_s, substeps, disturbance)
    train_idx, test_idx = split_indices(M, split, seed)
    normalizer = Normalizer.fit(deviation_offsets(plant), x=X[train_idx], y=Y[train_idx], u=U[train_idx])
    raw = TrajectoryDataset(U, X, Y, t_s, list(range(M)), normalized=False)
    train = raw.subset(train_idx).normalize(normalizer)
    test = raw.subset(test_idx).normalize(normalizer)
    return train, test, normalizer


# --------------------------------------------------------------- file I/O


def _write_csv(path, array, names):
    np.savetxt(path, array, fmt=FORMAT, delimiter=",", header=",".join(names), comments="")


def _read_csv(path):
    try:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc}") from exc


def save_dataset(directory, plant, train, test, normalizer, meta=None):
    """Write CSVs and ``manifest.json``; returns the manifest dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {"u": plant.input_names, "x": plant.state_names, "y": plant.output_names}
    files = []
    for part in (train, test):
        for j, i in enumerate(part.indices):
            for g, arr in (("u", part.inputs), ("x", part.states), ("y", part.outputs)):
                fname = f"traj_{i}_{g}.csv"
                _write_csv(directory / fname, arr[j], names[g])
                files.append(fname)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "plant": plant.name,
        "M": len(train) + len(test),
        "N": train.n_samples,
        "t_s": train.t_s,
        "train": list(train.indices),
        "test": list(test.indices),
        "normalized": True,
        "shapes": {"u": plant.n_u, "x": plant.n_x, "y": plant.n_y},
        "channels": {g: list(v) for g, v in names.items()},
        "normalizer": normalizer.to_dict(),
        "files": sorted(files),
    }
    if meta:
        manifest.update(meta)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(directory):
    """Read a dataset directory back; returns ``(train, test, normalizer, manifest)``."""
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"cannot read dataset manifest in {directory}: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ModelFileError(f"unsupported dataset format {manifest.get('format_version')!r}")
    shapes = manifest["shapes"]
    N = manifest["N"]

    def stack(indices):
        out = {}
        for g in ("u", "x", "y"):
            arrs = [_read_csv(directory / f"traj_{i}_{g}.csv") for i in indices]
            for a in arrs:
                if a.shape != (N, shapes[g]):
                    raise ModelFileError(f"dataset file has shape {a.shape}, expected {(N, shapes[g])}")
            out[g] = np.stack(arrs) if arrs else np.empty((0, N, shapes[g]))
        return TrajectoryDataset(out["u"], out["x"], out["y"], manifest["t_s"], list(indices), True)

    normalizer = Normalizer.from_dict(manifest["normalizer"])
    return stack(manifest["train"]), stack(manifest["test"]), normalizer, manifest


def directory_digest(directory):
    """SHA-256 over the names and bytes of every file in ``directory``."""
    h = hashlib.sha256()
    for path in sorted(Path(directory).rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(directory)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()
