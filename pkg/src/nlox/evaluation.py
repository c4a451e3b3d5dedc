"""Error metrics, observer-vs-truth reports and the Euler order probe.

Reported errors are in deviation-variable units, i.e. raw differences
``x - x_hat``.  Every observer runs on the whole test split; trajectories on
which an observer diverges are excluded from the pooled RMSE and counted.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import FORMAT, STREAM_EVAL, substream
from .errors import NumericalError
from .baselines import run_bernard, run_ekf, run_smo
from .observer import continuous_reference_rollout, rollout

log = logging.getLogger(__name__)


def rmse(truth, estimate):
    """Per-column root mean squared error, pooled over all leading axes."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {estimate.shape}")
    err = (truth - estimate).reshape(-1, truth.shape[-1])
    return np.sqrt(np.mean(err * err, axis=0))


def rsse(rmse_values):
    """Root of the sum of squared per-state RMSEs."""
    r = np.asarray(rmse_values, dtype=float)
    out = np.sqrt(np.sum(r * r, axis=-1))
    return float(out) if out.ndim == 0 else out


@dataclass
class EvalReport:
    observer: str
    state_names: tuple
    rmse: np.ndarray
    rsse: float
    rmse_per_trajectory: np.ndarray
    rmse_normalized: np.ndarray
    diverged: list
    truth: np.ndarray
    estimates: np.ndarray
    t_s: float
    model_based: bool = False
    trajectory_ids: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    exports: dict = field(default_factory=dict)
    config_digest: str = ""
    seed: int = None

    @property
    def diverged_count(self):
        return len(self.diverged)

    def rsse_per_trajectory(self):
        return np.sqrt(np.sum(self.rmse_per_trajectory**2, axis=-1))


# ------------------------------------------------------------- observers


class NloxObserver:
    """Learned observer; sees only normalized outputs and inputs."""

    model_based = False

    def __init__(self, model, name="nlox"):
        self.model = model
        self.name = name

    def run(self, dataset, normalizer, x0_hat=None):
        Z, X_hat = self.model.rollout(dataset.outputs, dataset.inputs)
        bounds = np.array([
            self.model.state_bound(dataset.outputs[i], dataset.inputs[i]) for i in range(len(dataset))
        ])
        info = {"max_z_norm": np.max(np.linalg.norm(Z, axis=-1), axis=-1), "z_bound": bounds}
        return normalizer.to_deviation("x", X_hat), info


class _ModelBasedObserver:
    model_based = True

    def __init__(self, plant, config, name):
        self.plant = plant
        self.config = config
        self.name = name

    def _raw(self, dataset, normalizer):
        return normalizer.invert("y", dataset.outputs), normalizer.invert("u", dataset.inputs)

    def _dev(self, estimates, normalizer):
        return estimates - normalizer.offset["x"]


class EkfObserver(_ModelBasedObserver):
    def __init__(self, plant, config, name="ekf"):
        super().__init__(plant, config, name)

    def run(self, dataset, normalizer, x0_hat):
        y, u = self._raw(dataset, normalizer)
        trace = run_ekf(self.plant, self.config, y, u, x0_hat, dataset.t_s)
        info = {
            "min_eigenvalue": np.nanmin(trace.min_eigenvalue, axis=-1, initial=np.inf),
            "asymmetry": np.nanmax(trace.asymmetry, axis=-1, initial=0.0),
        }
        return self._dev(trace.estimates, normalizer), info


class SmoObserver(_ModelBasedObserver):
    def __init__(self, plant, config, name="smo"):
        super().__init__(plant, config, name)

    def run(self, dataset, normalizer, x0_hat):
        y, u = self._raw(dataset, normalizer)
        est, _ = run_smo(self.plant, self.config, y, u, x0_hat, dataset.t_s)
        return self._dev(est, normalizer), {}


class BernardObserver(_ModelBasedObserver):
    def __init__(self, plant, config, name="bernard"):
        super().__init__(plant, config, name)

    def run(self, dataset, normalizer, x0_hat):
        y, u = self._raw(dataset, normalizer)
        self.config.skipped = 0
        est, _ = run_bernard(self.plant, self.config, y, u, x0_hat, dataset.t_s)
        return self._dev(est, normalizer), {"skipped_injections": np.full(len(dataset), self.config.skipped)}


class TruthObserver:
    """Returns the true states; a perfect reference for pipeline checks."""

    model_based = False
    name = "truth"

    def run(self, dataset, normalizer, x0_hat=None):
        return normalizer.to_deviation("x", dataset.states), {}


def sample_estimate_init(plant, n, seed):
    """Initial estimates drawn from the plant's initial-state distribution."""
    rng = substream(seed, STREAM_EVAL)
    return np.stack([plant.sample_initial_state(rng) for _ in range(n)])


# ------------------------------------------------------------ evaluation


def _run_guarded(observer, dataset, normalizer, x0_hat):
    """Run the whole split at once; on failure fall back to one trajectory at a time.

    Rows returned with non-finite estimates also count as diverged.
    """
    try:
        est, info = observer.run(dataset, normalizer, x0_hat)
        bad = np.flatnonzero(~np.all(np.isfinite(est), axis=(1, 2)))
        for i in bad:
            log.warning("%s diverged on test trajectory %d", observer.name, i)
        return est, info, [int(i) for i in bad]
    except NumericalError as exc:
        log.info("%s failed on the batch (%s); retrying per trajectory", observer.name, exc)
    n = len(dataset)
    est = np.full(dataset.states.shape, np.nan)
    info, diverged = {}, []
    for i in range(n):
        x0 = None if x0_hat is None else x0_hat[i:i + 1]
        try:
            e, inf = observer.run(dataset.subset([i]), normalizer, x0)
        except NumericalError as exc:
            diverged.append(i)
            log.warning("%s diverged on test trajectory %d: %s", observer.name, i, exc)
            continue
        if not np.all(np.isfinite(e)):
            diverged.append(i)
            continue
        est[i] = e[0]
        for key, v in inf.items():
            info.setdefault(key, np.full(n, np.nan))[i] = np.asarray(v).ravel()[0]
    return est, info, diverged


def evaluate_observer(observer, test_set, normalizer, x0_hat=None, state_names=(), seed=None, config_digest=""):
    """Run ``observer`` on every test trajectory and score it in deviation units."""
    if observer.model_based and x0_hat is None:
        raise ValueError(f"{observer.name} needs initial estimates")
    n_x = test_set.states.shape[-1]
    state_names = tuple(state_names) or tuple(f"x{i + 1}" for i in range(n_x))
    truth = normalizer.to_deviation("x", test_set.states)
    est, info, diverged = _run_guarded(observer, test_set, normalizer, x0_hat)
    keep = [i for i in range(len(test_set)) if i not in diverged]
    per_traj = np.full((len(test_set), n_x), np.nan)
    for i in keep:
        per_traj[i] = rmse(truth[i], est[i])
    if keep:
        pooled = rmse(truth[keep], est[keep])
        scale = normalizer.scale("x")
        pooled_norm = pooled / scale
    else:
        pooled = pooled_norm = np.full(n_x, np.nan)
    return EvalReport(
        observer=observer.name,
        state_names=state_names,
        rmse=pooled,
        rsse=rsse(pooled),
        rmse_per_trajectory=per_traj,
        rmse_normalized=pooled_norm,
        diverged=diverged,
        truth=truth,
        estimates=est,
        t_s=test_set.t_s,
        model_based=observer.model_based,
        trajectory_ids=list(test_set.indices),
        info=info,
        config_digest=config_digest,
        seed=seed,
    )


def _fmt(v):
    return FORMAT % v


def write_report(report, directory):
    """``report_<observer>.csv``: pooled, mean and per-trajectory RMSE rows."""
    path = Path(directory) / f"report_{report.observer}.csv"
    names = report.state_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"rmse_{s}" for s in names] + ["rsse"])
        w.writerow(["pooled"] + [_fmt(v) for v in report.rmse] + [_fmt(report.rsse)])
        finite = np.all(np.isfinite(report.rmse_per_trajectory), axis=-1)
        mean = report.rmse_per_trajectory[finite].mean(axis=0) if np.any(finite) else np.full(len(names), np.nan)
        w.writerow(["trajectory_mean"] + [_fmt(v) for v in mean] + [_fmt(rsse(mean))])
        for tid, r in zip(report.trajectory_ids, report.rmse_per_trajectory):
            w.writerow([f"trajectory_{tid}"] + [_fmt(v) for v in r] + [_fmt(rsse(r))])
    report.exports["report"] = str(path)
    return path


def compare_report(reports, directory=None, trajectory=0):
    """One row per observer, plus per-state time series of one test trajectory.

    Returns the table as a list of dicts.  With ``directory`` it writes
    ``compare.csv`` and ``timeseries_<state>.csv``.
    """
    if not reports:
        raise ValueError("need at least one report")
    names = reports[0].state_names
    rows = []
    for r in reports:
        row = {"observer": r.observer}
        row.update({f"rmse_{s}": float(v) for s, v in zip(names, r.rmse)})
        row["rsse"] = float(r.rsse)
        row.update({f"single_rmse_{s}": float(v) for s, v in zip(names, r.rmse_per_trajectory[trajectory])})
        row["single_rsse"] = rsse(r.rmse_per_trajectory[trajectory])
        row["diverged_count"] = r.diverged_count
        row["model_based"] = r.model_based
        rows.append(row)
    if directory is not None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "compare.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()})
        truth = reports[0].truth[trajectory]
        t = np.arange(truth.shape[0]) * reports[0].t_s
        for j, s in enumerate(names):
            cols = [t, truth[:, j]] + [r.estimates[trajectory][:, j] for r in reports]
            header = ["time", "truth"] + [r.observer for r in reports]
            np.savetxt(directory / f"timeseries_{s}.csv", np.column_stack(cols), fmt=FORMAT, delimiter=",",
                       header=",".join(header), comments="")
    return rows


# ---------------------------------------------------------- Euler probe


@dataclass
class DiscretizationProbeResult:
    t_s: np.ndarray
    errors: np.ndarray
    slope: float
    halving_ratios: np.ndarray


def refine_signals(outputs, inputs, factor):
    """Resample onto a grid ``factor`` times finer: inputs held, outputs linear."""
    outputs = np.asarray(outputs, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    N = outputs.shape[0]
    frac = np.arange(factor) / factor
    y0, y1 = outputs[:-1, None, :], outputs[1:, None, :]
    fine_y = (y0 + frac[None, :, None] * (y1 - y0)).reshape(-1, outputs.shape[1])
    fine_y = np.vstack([fine_y, outputs[-1:]])
    fine_u = np.repeat(inputs[:-1], factor, axis=0)
    fine_u = np.vstack([fine_u, inputs[-1:]])
    assert fine_y.shape[0] == (N - 1) * factor + 1
    return fine_y, fine_u


def discretization_probe(cfg, omega, outputs, inputs, t_s_list=(0.1, 0.05, 0.025, 0.0125), substeps=32):
    """Max gap between Euler rollouts and the continuous observer at the data instants.

    The data are sampled at ``t_s_list[0]``; finer steps must divide it.
    """
    t_s_list = np.asarray(t_s_list, dtype=float)
    if np.any(np.diff(t_s_list) >= 0):
        raise ValueError("t_s_list must be strictly decreasing")
    base = t_s_list[0]
    coarse = cfg.with_sampling_time(base)
    reference = continuous_reference_rollout(coarse, outputs, inputs, omega, substeps=substeps)
    errors = []
    for t_s in t_s_list:
        factor = int(round(base / t_s))
        if abs(factor * t_s - base) > 1e-12 * base:
            raise ValueError(f"t_s={t_s} does not divide the data sampling time {base}")
        fine_y, fine_u = refine_signals(outputs, inputs, factor)
        Z = rollout(cfg.with_sampling_time(t_s), fine_y, fine_u, omega)
        errors.append(float(np.max(np.linalg.norm(Z[::factor] - reference, axis=-1))))
    errors = np.array(errors)
    if np.all(errors > 0):
        slope = float(np.polyfit(np.log(t_s_list), np.log(errors), 1)[0])
        ratios = errors[1:] / errors[:-1]
    else:
        slope = float("nan")
        ratios = np.full(len(errors) - 1, np.nan)
    return DiscretizationProbeResult(t_s_list, errors, slope, ratios)


def write_probe(result, directory):
    path = Path(directory) / "probe.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "max_error", "ratio_to_previous"])
        for i, (t, e) in enumerate(zip(result.t_s, result.errors)):
            w.writerow([_fmt(t), _fmt(e), "" if i == 0 else _fmt(result.halving_ratios[i - 1])])
    return path
