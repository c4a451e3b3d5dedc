"""Joint training of the input term ``omega`` and the inverse map ``T_dagger``.

Each optimisation step uses one full trajectory.  Gradients flow through
the Euler observer recursion by exact backpropagation through time: the
``T_dagger`` parameters see only their direct error terms, while the
``omega`` parameters are reached through every later observer state.
"""

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .datagen import STREAM_INIT, STREAM_ORDER, substream
from .errors import DivergenceError, ModelFileError, NumericalError
from .neural import (
    MlpParams,
    RmspropState,
    init_params,
    load_params,
    mlp_backward,
    mlp_forward,
    rmsprop_update,
    save_params,
)
from .observer import DIVERGENCE_FACTOR, batched_rollout, ultimate_bound

log = logging.getLogger(__name__)

DECOMPOSITIONS = ("single", "per_state")


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-5
    omega_hidden: tuple = (48, 48, 48)
    tdagger_hidden: tuple = (48, 48, 48)
    decomposition: str = "single"
    seed: int = 0
    checkpoint_interval: int = 10
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    shuffle: bool = True
    compiled: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.decomposition not in DECOMPOSITIONS:
            raise ValueError(f"decomposition must be one of {DECOMPOSITIONS}")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        self.omega_hidden = tuple(int(w) for w in self.omega_hidden)
        self.tdagger_hidden = tuple(int(w) for w in self.tdagger_hidden)


@dataclass
class NloxModel:
    """Observer configuration plus the two learned maps.

    ``tdagger`` holds one network mapping ``z`` to the full state, or one
    scalar-output network per state.
    """

    observer: object
    omega: MlpParams
    tdagger: list
    state_names: tuple = ()
    decomposition: str = "single"

    @property
    def n_x(self):
        return sum(net.dims[-1] for net in self.tdagger)

    def omega_fn(self):
        """``z -> (n_z, n_u)`` callback for :func:`observer.rollout`."""
        shape = (self.observer.n_z, self.observer.n_u)
        return lambda z: mlp_forward(self.omega, z)[0].reshape(shape)

    def omega_batch(self, Z):
        out, _ = mlp_forward(self.omega, Z)
        return out.reshape(Z.shape[0], self.observer.n_z, self.observer.n_u)

    def estimate(self, Z):
        """State estimates ``T_dagger(z)`` for any leading shape of ``Z``."""
        return np.concatenate([mlp_forward(net, Z)[0] for net in self.tdagger], axis=-1)

    def omega_bound(self):
        return self.omega.output_bound()

    def state_bound(self, outputs, inputs):
        """Ultimate bound on ``||z_k||`` for the given output and input sequences."""
        y_max = float(np.max(np.linalg.norm(outputs, axis=-1)))
        u_max = float(np.max(np.linalg.norm(inputs, axis=-1)))
        return ultimate_bound(self.observer, y_max, u_max, self.omega_bound())

    def rollout(self, outputs, inputs, guard=True):
        """Batched rollout from ``z0 = 0``; returns ``(Z, X_hat)``."""
        bound = self.state_bound(outputs, inputs) if guard else None
        Z = batched_rollout(self.observer, outputs, inputs, self.omega_batch, z_bound=bound)
        return Z, self.estimate(Z)

    def copy(self):
        return NloxModel(self.observer, self.omega.copy(), [n.copy() for n in self.tdagger], self.state_names,
                         self.decomposition)

    def tdagger_names(self):
        if self.decomposition == "single":
            return ["all"]
        return list(self.state_names) if self.state_names else [str(i) for i in range(len(self.tdagger))]

    def save(self, directory, prefix=""):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_params(self.omega, directory / f"{prefix}omega.model", role="omega")
        for name, net in zip(self.tdagger_names(), self.tdagger):
            save_params(net, directory / f"{prefix}tdagger_{name}.model", role="tdagger", state=name)

    @classmethod
    def load(cls, directory, observer, state_names, decomposition, prefix=""):
        directory = Path(directory)
        omega = load_params(directory / f"{prefix}omega.model")
        names = ["all"] if decomposition == "single" else list(state_names)
        tdagger = [load_params(directory / f"{prefix}tdagger_{n}.model") for n in names]
        model = cls(observer, omega, tdagger, tuple(state_names), decomposition)
        model.validate()
        return model

    def validate(self):
        n_z, n_u = self.observer.n_z, self.observer.n_u
        if self.omega.dims[0] != n_z or self.omega.dims[-1] != n_z * n_u:
            raise ModelFileError(f"omega has dims {self.omega.dims}, expected {n_z} -> {n_z * n_u}")
        for net in self.tdagger:
            if net.dims[0] != n_z:
                raise ModelFileError(f"T_dagger network has input {net.dims[0]}, expected {n_z}")


def init_model(observer, n_x, config, state_names=()):
    """Networks drawn from the ``init`` substream of ``config.seed``."""
    rng = substream(config.seed, STREAM_INIT)
    seeds = rng.integers(0, 2**63 - 1, size=1 + n_x)
    n_z, n_u = observer.n_z, observer.n_u
    omega = init_params([n_z, *config.omega_hidden, n_z * n_u], int(seeds[0]))
    if config.decomposition == "per_state":
        tdagger = [init_params([n_z, *config.tdagger_hidden, 1], int(s)) for s in seeds[1:]]
    else:
        tdagger = [init_params([n_z, *config.tdagger_hidden, n_x], int(seeds[1]))]
    return NloxModel(observer, omega, tdagger, tuple(state_names), config.decomposition)


# ------------------------------------------------------------------ loss


def compute_loss(model, dataset, estimate=None):
    """Mean over all ``M * N`` samples of ``||x_k - T_dagger(z_k)||^2``.

    ``estimate`` overrides ``model.estimate`` (used for stub inverse maps).
    """
    Z, _ = model.rollout(dataset.outputs, dataset.inputs)
    X_hat = (estimate or model.estimate)(Z)
    err = dataset.states - X_hat
    return float(np.mean(np.sum(err * err, axis=-1)))


def _tdagger_forward(model, Z):
    outs, caches = [], []
    for net in model.tdagger:
        out, cache = mlp_forward(net, Z)
        outs.append(out)
        caches.append(cache)
    return np.concatenate(outs, axis=-1), caches


def _omega_forward(model, outputs, inputs, compiled):
    """Sequential rollout keeping every hidden activation of ``omega``."""
    cfg = model.observer
    Ws, bs = model.omega.weights, model.omega.biases
    n_hidden = len(Ws) - 1
    N = outputs.shape[0]
    Z = np.empty((N, cfg.n_z))
    Z[0] = 0.0
    H = [np.empty((N - 1, W.shape[0])) for W in Ws[:-1]]
    decay = 1.0 - cfg.t_s * cfg.eigenvalues
    drive = cfg.t_s * (outputs @ cfg.B.T)
    scaled_u = cfg.t_s * inputs
    if compiled:
        Ht = _kernels.typed(H)
        _kernels.forward_sweep(_kernels.typed(Ws), _kernels.typed(bs), decay, drive, scaled_u, Z, Ht)
        return Z, list(Ht)
    W_out, b_out = Ws[-1], bs[-1]
    shape = (cfg.n_z, cfg.n_u)
    for k in range(N - 1):
        h = Z[k]
        for layer in range(n_hidden):
            h = np.tanh(Ws[layer] @ h + bs[layer])
            H[layer][k] = h
        w = (W_out @ h + b_out).reshape(shape)
        Z[k + 1] = decay * Z[k] + drive[k] + w @ scaled_u[k]
    return Z, H


def _adjoint(model, inputs, grad_z, H, compiled):
    """Backward sweep through ``z_{k+1} = decay * z_k + t_s B y_k + t_s omega(z_k) u_k``.

    Returns the output delta of ``omega`` and the pre-activation deltas of
    its hidden layers at every step, plus the adjoint of ``z_0``.
    """
    cfg = model.observer
    Ws = model.omega.weights
    n_hidden = len(Ws) - 1
    N = grad_z.shape[0]
    decay = 1.0 - cfg.t_s * cfg.eigenvalues
    scaled_u = cfg.t_s * inputs
    out_deltas = np.empty((N - 1, cfg.n_z * cfg.n_u))
    deltas = [np.empty_like(h) for h in H]
    if compiled:
        dt = _kernels.typed(deltas)
        a = _kernels.adjoint_sweep(_kernels.typed(Ws), decay, scaled_u, grad_z, _kernels.typed(H), out_deltas, dt)
        return out_deltas, list(dt), a
    W_out = Ws[-1]
    a = grad_z[N - 1].copy()
    for k in range(N - 2, -1, -1):
        og = np.outer(a, scaled_u[k]).ravel()
        out_deltas[k] = og
        d = og @ W_out
        for layer in range(n_hidden - 1, -1, -1):
            h = H[layer][k]
            d = d * (1.0 - h * h)
            deltas[layer][k] = d
            d = d @ Ws[layer]
        a = grad_z[k] + decay * a + d
    return out_deltas, deltas, a


def bptt_gradients(model, states, outputs, inputs, z_bound=None, compiled=True):
    """Exact gradient of one trajectory's loss ``(1/N) sum_k ||x_k - T_dagger(z_k)||^2``.

    Returns ``(grad_omega, grad_tdagger, loss)`` where ``grad_tdagger`` is a
    list matching ``model.tdagger``.  ``z_bound`` enables the divergence
    guard at ``10 * z_bound``.  ``compiled=False`` runs both sequential
    sweeps in plain numpy.
    """
    states = np.asarray(states, dtype=float)
    outputs = np.asarray(outputs, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    N = states.shape[0]
    Z, H = _omega_forward(model, outputs, inputs, compiled)
    norms = np.linalg.norm(Z, axis=1)
    limit = np.inf if z_bound is None else DIVERGENCE_FACTOR * z_bound
    bad = ~(norms <= limit)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise DivergenceError(f"observer state diverged at step {k} (|z| = {norms[k]:.3g})", index=k)

    X_hat, caches = _tdagger_forward(model, Z)
    err = states - X_hat
    loss = float(np.sum(err * err) / N)
    out_grad = (-2.0 / N) * err
    grad_z = np.zeros_like(Z)
    grad_tdagger = []
    col = 0
    for net, cache in zip(model.tdagger, caches):
        width = net.dims[-1]
        gz, g = mlp_backward(net, cache, out_grad[:, col:col + width])
        grad_z += gz
        grad_tdagger.append(g)
        col += width

    out_deltas, deltas, a = _adjoint(model, inputs, grad_z, H, compiled)
    if not np.all(np.isfinite(a)):
        bad = ~np.all(np.isfinite(out_deltas), axis=1)
        k = int(np.max(np.nonzero(bad)[0])) if np.any(bad) else 0
        raise NumericalError(f"non-finite adjoint at step {k}")

    layer_inputs = [Z[:-1]] + H
    all_deltas = deltas + [out_deltas]
    gw = [dl.T @ inp for dl, inp in zip(all_deltas, layer_inputs)]
    gb = [dl.sum(axis=0) for dl in all_deltas]
    return MlpParams(gw, gb), grad_tdagger, loss


# --------------------------------------------------------------- reports


@dataclass
class LossReport:
    initial_loss: float = float("nan")
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    test_rmse: list = field(default_factory=list)
    test_rmse_normalized: list = field(default_factory=list)
    omega_norm: list = field(default_factory=list)
    tdagger_norm: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    rejected_updates: int = 0
    best_epoch: int = 0

    @property
    def epochs(self):
        return len(self.train_loss)

    def to_state(self):
        d = {k: v for k, v in self.__dict__.items() if k != "wall_clock"}
        d["test_rmse"] = [list(map(float, r)) for r in self.test_rmse]
        d["test_rmse_normalized"] = [list(map(float, r)) for r in self.test_rmse_normalized]
        return d

    @classmethod
    def from_state(cls, d):
        report = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        report.wall_clock = [float("nan")] * report.epochs
        return report

    def truncate(self, epochs):
        for key in ("train_loss", "test_loss", "test_rmse", "test_rmse_normalized", "omega_norm", "tdagger_norm", "wall_clock"):
            setattr(self, key, getattr(self, key)[:epochs])


def split_rmse(model, dataset, scale=None):
    """Pooled per-state RMSE over a dataset in normalized and scaled units."""
    Z, X_hat = model.rollout(dataset.outputs, dataset.inputs)
    err = dataset.states - X_hat
    normalized = np.sqrt(np.mean(err * err, axis=(0, 1)))
    scaled = normalized if scale is None else normalized * np.asarray(scale)
    return float(np.mean(np.sum(err * err, axis=-1))), normalized, scaled


def _write_history(run_dir, report, state_names):
    with open(run_dir / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_loss", "omega_norm", "tdagger_norm"])
        w.writerow([0, repr(report.initial_loss), "", "", ""])
        for e in range(report.epochs):
            w.writerow([e + 1, repr(report.train_loss[e]), repr(report.test_loss[e]),
                        repr(report.omega_norm[e]), repr(report.tdagger_norm[e])])
    with open(run_dir / "rmse_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"rmse_{s}" for s in state_names] + [f"rmse_norm_{s}" for s in state_names] + ["rsse"])
        for e in range(report.epochs):
            r = report.test_rmse[e]
            w.writerow([e + 1] + [repr(float(v)) for v in r] + [repr(float(v)) for v in report.test_rmse_normalized[e]]
                       + [repr(float(np.sqrt(np.sum(np.square(r)))))])


def _save_checkpoint(directory, model, opt_states, report, epoch):
    directory.mkdir(parents=True, exist_ok=True)
    model.save(directory)
    nets = [model.omega] + model.tdagger
    for j, (net, opt) in enumerate(zip(nets, opt_states)):
        acc = MlpParams(opt.square_avg[0::2], opt.square_avg[1::2])
        save_params(acc, directory / f"optimizer_{j}.model", role="rmsprop_accumulator")
    state = {
        "epoch": epoch,
        "optimizer_steps": [o.steps for o in opt_states],
        "optimizer_rejected": [o.rejected for o in opt_states],
        "report": report.to_state(),
    }
    with open(directory / "state.json", "w") as fh:
        json.dump(state, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_checkpoint(directory, model, opt_states):
    with open(directory / "state.json") as fh:
        state = json.load(fh)
    loaded = NloxModel.load(directory, model.observer, model.state_names, model.decomposition)
    # copy in place: the optimizer loop holds references to these arrays
    for net, saved in zip([model.omega] + model.tdagger, [loaded.omega] + loaded.tdagger):
        net.set_flat(saved.flat())
    for j, opt in enumerate(opt_states):
        acc = load_params(directory / f"optimizer_{j}.model")
        opt.square_avg = acc.arrays()
        opt.steps = state["optimizer_steps"][j]
        opt.rejected = state["optimizer_rejected"][j]
    return state["epoch"], LossReport.from_state(state["report"])


def latest_checkpoint(run_dir):
    ckpts = sorted(Path(run_dir).glob("checkpoints/epoch_*"))
    return ckpts[-1] if ckpts else None


def train(config, train_set, test_set, observer, normalizer=None, run_dir=None, resume=False,
          model=None, state_names=(), progress=None):
    """Run ``config.epochs`` epochs of one RMSprop step per training trajectory.

    Returns ``(model, report)``.  With ``run_dir`` the histories, final and
    best-on-test models and periodic checkpoints are written there.
    ``progress`` receives one line of text per epoch.
    """
    n_x = train_set.states.shape[-1]
    if not state_names:
        state_names = tuple(f"x{i + 1}" for i in range(n_x))
    if model is None:
        model = init_model(observer, n_x, config, state_names)
    model.validate()
    nets = [model.omega] + model.tdagger
    opt_states = [
        RmspropState.for_params(n, config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon) for n in nets
    ]
    scale = None if normalizer is None else normalizer.scale("x")
    run_dir = None if run_dir is None else Path(run_dir)
    report = LossReport()
    start = 0
    if resume and run_dir is not None:
        ckpt = latest_checkpoint(run_dir)
        if ckpt is not None:
            start, report = _load_checkpoint(ckpt, model, opt_states)
            log.info("resumed from %s at epoch %d", ckpt, start)
    if start == 0:
        report.initial_loss = compute_loss(model, train_set)
    best_rsse = np.inf
    if report.test_rmse:
        best_rsse = min(float(np.sqrt(np.sum(np.square(r)))) for r in report.test_rmse)

    M = len(train_set)
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        order = substream(config.seed, STREAM_ORDER, epoch).permutation(M) if config.shuffle else np.arange(M)
        for i in order:
            bound = model.state_bound(train_set.outputs[i], train_set.inputs[i])
            try:
                g_omega, g_tdagger, _ = bptt_gradients(
                    model, train_set.states[i], train_set.outputs[i], train_set.inputs[i], z_bound=bound,
                    compiled=config.compiled,
                )
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch + 1}, trajectory {i}: {exc}", index=exc.index) from exc
            for net, grad, opt in zip(nets, [g_omega] + g_tdagger, opt_states):
                rmsprop_update(net, grad, opt)
        report.train_loss.append(compute_loss(model, train_set))
        if len(test_set):
            test_loss, rmse_norm, rmse = split_rmse(model, test_set, scale)
        else:
            test_loss, rmse_norm, rmse = float("nan"), np.full(n_x, np.nan), np.full(n_x, np.nan)
        report.test_loss.append(test_loss)
        report.test_rmse.append([float(v) for v in rmse])
        report.test_rmse_normalized.append([float(v) for v in rmse_norm])
        report.omega_norm.append(float(np.linalg.norm(model.omega.flat())))
        report.tdagger_norm.append(float(np.sqrt(sum(np.sum(n.flat() ** 2) for n in model.tdagger))))
        report.wall_clock.append(time.perf_counter() - t0)
        report.rejected_updates = sum(o.rejected for o in opt_states)
        if not np.isfinite(report.train_loss[-1]):
            raise DivergenceError(f"training loss became non-finite in epoch {epoch + 1}", index=epoch + 1)
        rsse = float(np.sqrt(np.sum(np.square(rmse))))
        improved = rsse < best_rsse
        if improved:
            best_rsse = rsse
            report.best_epoch = epoch + 1
        if progress is not None:
            progress(
                f"epoch {epoch + 1:4d}  loss {report.train_loss[-1]:.6e}  test rmse "
                + " ".join(f"{v:.5f}" for v in rmse)
                + f"  ({report.wall_clock[-1]:.1f} s)"
            )
        if run_dir is not None:
            if improved:
                model.save(run_dir / "best")
            if (epoch + 1) % config.checkpoint_interval == 0:
                _save_checkpoint(run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}", model, opt_states, report, epoch + 1)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        model.save(run_dir)
        _write_history(run_dir, report, state_names)
    return model, report


# ---------------------------------------------------------------- grids

GRID_AXES = {"width": (16, 32, 48, 64), "trajectories": (50, 100, 200, 300)}


def grid_search(cell_fn, axis, values, jobs=1):
    """Evaluate ``cell_fn(value)`` for each grid value.

    ``cell_fn`` returns a dict of metrics.  A failing cell is recorded with
    its error message and the search continues.  With ``jobs > 1`` cells
    run in separate processes, so ``cell_fn`` must be picklable.
    """
    if axis not in GRID_AXES:
        raise ValueError(f"unknown grid axis {axis!r}; choose from {sorted(GRID_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("grid axis has no values")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(cell_fn, v) for v in values]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append((f.result(), None))
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    outcomes.append((None, exc))
    else:
        outcomes = []
        for v in values:
            try:
                outcomes.append((cell_fn(v), None))
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                outcomes.append((None, exc))
    rows = []
    for v, (metrics, exc) in zip(values, outcomes):
        row = {"axis": axis, "value": v}
        if exc is None:
            row.update(metrics)
            row["status"] = "ok"
        else:
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_grid_results(path, rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
