"""Model-based comparison observers: EKF, adaptive sliding mode, and the
explicit KKL observer of the bioreactor in x-coordinates.

All observers work in raw plant units and advance a batch of trajectories
together: estimates have shape ``(B, n_x)``.  Measurements and inputs are
held constant over each sampling interval.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, DomainError, FilterDivergenceError, NumericalError
from .numerics import composite_nodes, lu_solve_batched, rk4_step
from .plants import WilliamsOttoParams, arrhenius_rates

log = logging.getLogger(__name__)

SINGULAR_PIVOT = 1e-10


# ---------------------------------------------------------------- marching


def march(step, x0, n_samples, aux=None):
    """Advance a batch sample by sample, retiring trajectories that fail.

    ``step(x, aux, k, rows)`` advances the live rows ``rows`` from sample
    ``k`` to ``k + 1`` and returns the new ``(x, aux)``.  When a batched
    step raises, the rows are retried one at a time so a single bad
    trajectory does not stop the others.  Retired rows hold NaN from the
    failing sample on.

    Returns ``(estimates (B, N, n_x), aux_history, diverged)``, where
    ``diverged`` maps a row index to ``(sample, message)``.
    """
    x = np.array(x0, dtype=float)
    B, n = x.shape
    est = np.full((B, n_samples, n), np.nan)
    live = np.ones(B, dtype=bool)
    diverged = {}
    history = []
    for k in range(n_samples):
        est[live, k] = x[live]
        history.append(None if aux is None else aux.copy())
        if k == n_samples - 1:
            break
        rows = np.flatnonzero(live)
        if rows.size == 0:
            continue
        try:
            x_new, aux_new = step(x[rows], None if aux is None else aux[rows], k, rows)
            x[rows] = x_new
            if aux is not None:
                aux[rows] = aux_new
            continue
        except NumericalError:
            pass
        for i in rows:
            one = np.array([i])
            try:
                x_new, aux_new = step(x[one], None if aux is None else aux[one], k, one)
            except NumericalError as exc:
                live[i] = False
                diverged[int(i)] = (k + 1, str(exc))
                log.warning("trajectory %d diverged at sample %d: %s", i, k + 1, exc)
                continue
            x[one] = x_new
            if aux is not None:
                aux[one] = aux_new
    return est, history, diverged


# ----------------------------------------------------------------- Jacobians


def _rhs_checked(plant, x, u):
    try:
        v = plant.dynamics(x, u)
    except (NumericalError, FloatingPointError):
        return None
    return v if np.all(np.isfinite(v)) else None


def jacobian_numeric(plant, x_hat, u, fd_step=1e-6):
    """Central-difference Jacobians ``(A, C)`` of the vector field and of ``h``.

    ``x_hat`` and ``u`` may carry a leading batch axis.  When a probe point
    cannot be evaluated the step is shrunk tenfold once before giving up.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x_hat.shape[-1]
    A = np.empty(x_hat.shape + (n,))
    C = np.empty(x_hat.shape[:-1] + (plant.n_y, n))
    for j in range(n):
        for h in (fd_step, 0.1 * fd_step):
            e = np.zeros(n)
            e[j] = h
            fp, fm = _rhs_checked(plant, x_hat + e, u), _rhs_checked(plant, x_hat - e, u)
            if fp is not None and fm is not None:
                break
        else:
            raise DomainError(f"cannot probe the vector field around the estimate along state {j}", index=j)
        A[..., :, j] = (fp - fm) / (2 * h)
        C[..., :, j] = (plant.eval_h(x_hat + e) - plant.eval_h(x_hat - e)) / (2 * h)
    return A, C


def bioreactor_jacobian(plant, x_hat, u, fd_step=None):
    """Closed-form Jacobians of the bioreactor with ``C = [1, 0]``."""
    x_hat = np.asarray(x_hat, dtype=float)
    x1, x2 = x_hat[..., 0], x_hat[..., 1]
    d = np.asarray(u, dtype=float)[..., 0]
    xi2 = (x1 + x2) ** 2
    A = np.empty(x_hat.shape + (2,))
    A[..., 0, 0] = (x2 * (x1 + x2) - x1 * x2) / xi2 - d
    A[..., 0, 1] = (x1 * (x1 + x2) - x1 * x2) / xi2
    A[..., 1, 0] = (-x2 * (x1 + x2) + x1 * x2) / xi2
    A[..., 1, 1] = (-x1 * (x1 + x2) + x1 * x2) / xi2 - d
    C = np.zeros(x_hat.shape[:-1] + (1, 2))
    C[..., 0, 0] = 1.0
    return A, C


def williams_otto_printed_jacobian(x_hat, u, params):
    """The linearisation ``A_1 + Delta A`` exactly as printed for the CSTR, in 1/s.

    Kept for reproduction studies only; several entries differ from the true
    Jacobian of the mass balances (see the baseline tests).
    """
    x_hat = np.asarray(x_hat, dtype=float)
    u = np.asarray(u, dtype=float)
    k1, k2, k3 = arrhenius_rates(u[..., 1], params)
    xA, xB, xC, xE, xG, xP = (x_hat[..., i] for i in range(6))
    z = np.zeros_like(xA)
    one = np.ones_like(xA)
    rows = [
        [-k1 * xB, -k1 * xA, z, z, z, z],
        [-k1 * xB, -k1 * xA - k2 * xC, -k2 * xB, z, z, z],
        [2 * k1 * xB, 2 * k1 * xA - 2 * k2 * xC, -k2 * xB - k3 * xP, z, z, z],
        [z, 2 * k2 * xC, k2 * xB, one, z, z],
        [z, z, 1.5 * k3 * xP, z, one, 1.5 * k3 * xC],
        [z, k2 * xC, k2 * xB - 0.5 * k3 * xP, z, z, -0.5 * k3 * xC],
    ]
    delta = np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
    flow = (params.F_A + u[..., 0]) / params.W
    return delta - flow[..., None, None] * np.eye(6)


def williams_otto_literal_jacobian(params):
    """Jacobian provider using the printed linearisation and ``C = [0 0 0 1 0 1]``."""

    def provider(plant, x_hat, u, fd_step=None):
        A = williams_otto_printed_jacobian(x_hat, u, params)
        if params.dimensionless_time:
            A = A * params.tau_star
        C = np.zeros(np.shape(x_hat)[:-1] + (1, 6))
        C[..., 0, 3] = C[..., 0, 5] = 1.0
        return A, C

    return provider


# ----------------------------------------------------------------------- EKF


@dataclass
class EkfConfig:
    """Continuous-time EKF weights.

    ``output_map`` (``n_m x n_y``) replaces the measurement by
    ``output_map @ y`` and ``h`` by ``output_map @ h``; ``R`` is then
    ``n_m x n_m``.  The literal CSTR variant uses ``[[1, 1]]``.

    Each interval takes at least ``substeps`` RK4 steps, more when the
    stiffness of the joint state/covariance flow at the current estimate
    times the step exceeds ``stability_target``.
    """

    Q: np.ndarray
    R: np.ndarray
    P0: np.ndarray
    jacobian: str = "numeric"
    fd_step: float = 1e-6
    output_map: np.ndarray = None
    substeps: int = 10
    stability_target: float = 2.0
    max_substeps: int = 5000

    def __post_init__(self):
        if not 0 < self.stability_target <= 2.5:
            raise ValueError("stability_target must lie in (0, 2.5]")
        if self.substeps < 1 or self.max_substeps < self.substeps:
            raise ValueError("need 1 <= substeps <= max_substeps")
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        for name in ("Q", "R", "P0"):
            M = getattr(self, name)
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            if not np.all(np.linalg.eigvalsh(M) > 0):
                raise ValueError(f"{name} must be positive definite")
        if self.output_map is not None:
            self.output_map = np.atleast_2d(np.asarray(self.output_map, dtype=float))
        if not 1e-10 <= self.fd_step <= 1e-2:
            raise ValueError("fd_step out of range")

    def sized(self, n_x, n_m):
        """Copy with 1 x 1 weights expanded to multiples of the identity."""

        def expand(M, n, name):
            if M.shape == (1, 1) and n > 1:
                return M[0, 0] * np.eye(n)
            if M.shape != (n, n):
                raise ValueError(f"{name} has shape {M.shape}, expected {(n, n)}")
            return M

        return replace(self, Q=expand(self.Q, n_x, "Q"), R=expand(self.R, n_m, "R"), P0=expand(self.P0, n_x, "P0"))


@dataclass
class EkfTrace:
    estimates: np.ndarray
    min_eigenvalue: np.ndarray
    asymmetry: np.ndarray
    diverged: dict = field(default_factory=dict)


def _jacobian_provider(plant, cfg):
    if cfg.jacobian == "numeric":
        return jacobian_numeric
    if cfg.jacobian == "analytic" and plant.name == "bioreactor":
        return bioreactor_jacobian
    if cfg.jacobian == "literal" and plant.name == "williams_otto":
        return williams_otto_literal_jacobian(WilliamsOttoParams())
    raise ValueError(f"jacobian provider {cfg.jacobian!r} is not available for {plant.name}")


def _measurement(plant, cfg, x, C):
    h = plant.eval_h(x)
    if cfg.output_map is None:
        return h, C
    h = h @ cfg.output_map.T
    if C.shape[-2] == cfg.output_map.shape[1]:
        C = cfg.output_map @ C
    return h, C


def ekf_substeps(cfg, linearisation, P, R_inv, t_s):
    """RK4 steps per interval from the fastest mode of the covariance flow.

    ``dP/dt`` linearised in ``P`` has rates ``lambda_i + lambda_j`` of ``A``
    plus the measurement damping ``2 |P C^T R^-1 C|``.
    """
    A, C = linearisation
    with np.errstate(all="ignore"):
        spectral = np.max(np.abs(np.linalg.eigvals(A)), axis=-1)
        damping = np.linalg.norm(np.asarray(P) @ np.swapaxes(C, -1, -2) @ R_inv @ C, ord=2, axis=(-2, -1))
    rate = float(np.max(2.0 * spectral + 2.0 * damping, initial=0.0))
    if not np.isfinite(rate):
        raise NumericalError("EKF linearisation is not finite")
    needed = int(np.ceil(t_s * rate / cfg.stability_target))
    return int(min(max(cfg.substeps, needed), cfg.max_substeps))


def ekf_step(plant, cfg, x_hat, P, y, u, t_s, provider=None):
    """Advance ``(x_hat, P)`` jointly over one sampling interval with RK4.

    Returns ``(x_hat', P')``; ``P'`` is symmetrised.  Raises
    :class:`FilterDivergenceError` when ``P'`` is not positive definite.
    """
    provider = provider or _jacobian_provider(plant, cfg)
    x_hat = np.asarray(x_hat, dtype=float)
    batch = x_hat.shape[:-1]
    n = x_hat.shape[-1]
    cfg = cfg.sized(n, plant.n_y if cfg.output_map is None else cfg.output_map.shape[0])
    y = np.asarray(y, dtype=float)
    y_eff = y if cfg.output_map is None else y @ cfg.output_map.T
    R_inv = np.linalg.inv(cfg.R)

    def deriv(state, t):
        x = state[..., :n]
        Pm = state[..., n:].reshape(batch + (n, n))
        A, C = provider(plant, x, u, cfg.fd_step)
        h, C = _measurement(plant, cfg, x, C)
        PCt = Pm @ np.swapaxes(C, -1, -2)
        gain = PCt @ R_inv
        dx = plant.dynamics(x, u) + np.einsum("...ij,...j->...i", gain, y_eff - h)
        dP = A @ Pm + Pm @ np.swapaxes(A, -1, -2) + cfg.Q - gain @ np.swapaxes(PCt, -1, -2)
        return np.concatenate([dx, dP.reshape(batch + (n * n,))], axis=-1)

    state = np.concatenate([x_hat, np.asarray(P, dtype=float).reshape(batch + (n * n,))], axis=-1)
    try:
        A0, C0 = provider(plant, x_hat, u, cfg.fd_step)
        n_sub = ekf_substeps(cfg, (A0, _measurement(plant, cfg, x_hat, C0)[1]), P, R_inv, t_s)
        h = t_s / n_sub
        for j in range(n_sub):
            state = rk4_step(deriv, state, j * h, h)
    except NumericalError as exc:
        raise FilterDivergenceError(f"EKF integration failed: {exc}") from exc
    P_new = state[..., n:].reshape(batch + (n, n))
    P_new = 0.5 * (P_new + np.swapaxes(P_new, -1, -2))
    if not np.all(np.isfinite(P_new)) or np.any(np.linalg.eigvalsh(P_new)[..., 0] <= 0):
        raise FilterDivergenceError("EKF covariance lost positive definiteness")
    return state[..., :n], P_new


def run_ekf(plant, cfg, outputs, inputs, x0_hat, t_s):
    """Filter a batch of trajectories; ``outputs`` is ``(B, N, n_y)``."""
    provider = _jacobian_provider(plant, cfg)
    B, N = outputs.shape[:2]
    n = plant.n_x
    cfg = cfg.sized(n, plant.n_y if cfg.output_map is None else cfg.output_map.shape[0])
    P0 = np.broadcast_to(cfg.P0, (B, n, n)).copy()

    def step(x, P, k, rows):
        return ekf_step(plant, cfg, x, P, outputs[rows, k], inputs[rows, k], t_s, provider)

    est, history, diverged = march(step, x0_hat, N, aux=P0)
    P = np.stack(history, axis=1)
    with np.errstate(invalid="ignore"):
        bad = ~np.all(np.isfinite(est), axis=-1)
        P[bad] = np.nan
        min_eig = np.full((B, N), np.nan)
        good = ~bad
        min_eig[good] = np.linalg.eigvalsh(P[good])[:, 0]
        asym = np.linalg.norm(P - np.swapaxes(P, -1, -2), axis=(-2, -1))
    return EkfTrace(est, min_eig, asym, diverged)


# ----------------------------------------------------------------------- SMO


@dataclass
class SmoConfig:
    gain: np.ndarray
    epsilon: float = 0.01
    adaptive_rho: bool = True
    substeps: int = 10

    def __post_init__(self):
        self.gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not np.all(np.isfinite(self.gain)):
            raise ValueError("gain must be finite")


def smo_correction(cfg, residual):
    """``L' (rho * tanh(residual / eps))`` with ``rho = |residual|`` when adaptive."""
    rho = np.abs(residual) if cfg.adaptive_rho else 1.0
    return (rho * np.tanh(residual / cfg.epsilon)) @ cfg.gain.T


def smo_step(plant, cfg, x_hat, y, u, t_s):
    y = np.asarray(y, dtype=float)

    def deriv(x, t):
        return plant.dynamics(x, u) + smo_correction(cfg, y - plant.eval_h(x))

    x = np.asarray(x_hat, dtype=float)
    h = t_s / cfg.substeps
    try:
        for j in range(cfg.substeps):
            x = rk4_step(deriv, x, j * h, h)
    except NumericalError as exc:
        raise DivergenceError(f"SMO estimate diverged: {exc}") from exc
    return x


def run_smo(plant, cfg, outputs, inputs, x0_hat, t_s):
    """Returns ``(estimates, diverged)``; see :func:`march`."""

    def step(x, _, k, rows):
        return smo_step(plant, cfg, x, outputs[rows, k], inputs[rows, k], t_s), None

    est, _, diverged = march(step, x0_hat, outputs.shape[1])
    return est, diverged


# ------------------------------------------------- explicit bioreactor KKL

INTEGRANDS = ("printed", "pde")


@dataclass
class BernardConfig:
    """Explicit KKL observer for the Contois bioreactor.

    ``integrand="printed"`` uses the weight ``1 + 1/(xi - s)``;
    ``"pde"`` uses ``xi / (xi - s)``, for which the transformation solves
    the KKL PDE of the drift exactly.

    The printed weight makes the output injection high-gain (the injected
    mode decays at rates of order 1e3 to 1e4), so each sampling interval
    is split into at least ``substeps`` RK4 steps and more whenever
    ``step * |gain| > stability_target``, up to ``max_substeps``.
    """

    lambda_stars: tuple = (3.0, 6.0)
    panels: int = 4
    nodes_per_panel: int = 8
    jacobian_fd_step: float = 1e-6
    integrand: str = "printed"
    substeps: int = 10
    stability_target: float = 1.0
    max_substeps: int = 20000
    compiled: bool = True
    skipped: int = field(default=0, compare=False)

    def __post_init__(self):
        self.lambda_stars = tuple(float(l) for l in self.lambda_stars)
        if not all(l > 0 for l in self.lambda_stars):
            raise ValueError("lambda_stars must be positive")
        if len(self.lambda_stars) != 2:
            raise ValueError("the bioreactor observer needs exactly two lambda_stars")
        if not 1e-8 <= self.jacobian_fd_step <= 1e-4:
            raise ValueError("jacobian_fd_step must lie in [1e-8, 1e-4]")
        if self.integrand not in INTEGRANDS:
            raise ValueError(f"integrand must be one of {INTEGRANDS}")
        if not 0 < self.stability_target <= 2.5:
            raise ValueError("stability_target must lie in (0, 2.5]")
        if self.substeps < 1 or self.max_substeps < self.substeps:
            raise ValueError("need 1 <= substeps <= max_substeps")


def bernard_integrand(s, x1, xi, lambda_star, variant="printed"):
    bracket = ((xi - x1) / (xi - s)) * (s / x1)
    weight = 1.0 + 1.0 / (xi - s) if variant == "printed" else xi / (xi - s)
    return bracket**lambda_star * weight


def bernard_T(x1, xi, lambda_star, panels=4, nodes_per_panel=8, variant="printed"):
    """``T_lambda(x1, xi) = int_0^x1 bracket(s)^lambda * weight(s) ds``.

    The integrand has a layer of width ``xi - x1`` at ``s = x1``; the
    substitution ``xi - s = (xi - x1) exp(t)`` flattens it before composite
    Gauss-Legendre is applied on ``t in [0, log(xi / (xi - x1))]``.
    Broadcasts over ``x1`` and ``xi``.
    """
    x1 = np.asarray(x1, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.any(x1 < 0) or np.any(xi <= x1):
        raise DomainError("need 0 <= x1 < xi (positive substrate)")
    x1, xi = np.broadcast_arrays(x1, xi)
    substrate = xi - x1
    t, w = composite_nodes(np.zeros_like(x1), np.log(xi / substrate), panels, nodes_per_panel)
    r = substrate[..., None] * np.exp(t)
    # x1 = 0 gives zero-width panels; any finite stand-in keeps the integrand finite
    safe_x1 = np.where(x1 > 0, x1, 1.0)[..., None]
    vals = bernard_integrand(xi[..., None] - r, safe_x1, xi[..., None], lambda_star, variant)
    out = np.sum(vals * r * w, axis=-1)
    return float(out) if out.ndim == 0 else out


def bernard_transform(cfg, x):
    """``T(x1, x2)`` stacked over the configured ``lambda_stars``; ``x`` is ``(..., 2)``."""
    x = np.asarray(x, dtype=float)
    x1, xi = x[..., 0], x[..., 0] + x[..., 1]
    return np.stack(
        [bernard_T(x1, xi, lam, cfg.panels, cfg.nodes_per_panel, cfg.integrand) for lam in cfg.lambda_stars],
        axis=-1,
    )


def bernard_jacobian(cfg, x):
    """``dT/dx`` by central differences with relative steps; returns ``(..., 2, 2)``."""
    x = np.asarray(x, dtype=float)
    h = cfg.jacobian_fd_step * np.abs(x)
    probes = np.repeat(x[..., None, :], 4, axis=-2)
    probes[..., 0, 0] += h[..., 0]
    probes[..., 1, 0] -= h[..., 0]
    probes[..., 2, 1] += h[..., 1]
    probes[..., 3, 1] -= h[..., 1]
    T = bernard_transform(cfg, probes)
    J = np.empty(x.shape + (2,))
    J[..., :, 0] = (T[..., 0, :] - T[..., 1, :]) / (2 * h[..., 0, None])
    J[..., :, 1] = (T[..., 2, :] - T[..., 3, :]) / (2 * h[..., 1, None])
    return J


def bernard_gain(cfg, x):
    """``(dT/dx)^-1 [1, 1]^T``; zero where ``x`` leaves the positive
    quadrant or the Jacobian pivot drops below 1e-10."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape)
    ok = np.all(x > 0, axis=-1)
    if np.any(ok):
        J = bernard_jacobian(cfg, x[ok])
        sol, pivot = lu_solve_batched(J, np.ones(J.shape[:-1]))
        good = pivot >= SINGULAR_PIVOT
        sol[~good] = 0.0
        out[ok] = sol
        cfg.skipped += int(np.sum(~good))
    cfg.skipped += int(np.sum(~ok))
    return out


def bernard_injection(cfg, x, residual):
    """Output injection ``(dT/dx)^-1 [1, 1]^T (y - x1)``."""
    return bernard_gain(cfg, x) * np.asarray(residual, dtype=float)[..., :1]


def bernard_substeps(cfg, gain, t_s):
    """RK4 steps per interval keeping ``step * |gain_1|`` within the target."""
    worst = float(np.max(np.abs(np.asarray(gain)[..., 0]), initial=0.0))
    needed = int(np.ceil(t_s * worst / cfg.stability_target))
    return int(min(max(cfg.substeps, needed), cfg.max_substeps))


def bernard_observer_step(plant, cfg, x_hat, y, u, t_s):
    y = np.asarray(y, dtype=float)

    def deriv(x, t):
        return plant.dynamics(x, u) + bernard_injection(cfg, x, y - x[..., :1])

    x = np.asarray(x_hat, dtype=float)
    skipped = cfg.skipped
    n_sub = bernard_substeps(cfg, bernard_gain(cfg, x), t_s)
    cfg.skipped = skipped
    h = t_s / n_sub
    try:
        for j in range(n_sub):
            x = rk4_step(deriv, x, j * h, h)
    except NumericalError as exc:
        raise DivergenceError(f"explicit KKL estimate diverged: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise DivergenceError("explicit KKL estimate is not finite")
    return x


def _bernard_compiled(plant, cfg, outputs, inputs, x0_hat, t_s):
    from . import _kernels

    t_ref, w_ref = composite_nodes(0.0, 1.0, cfg.panels, cfg.nodes_per_panel)
    B, N = outputs.shape[:2]
    est = np.full((B, N, 2), np.nan)
    diverged = {}
    for i in range(B):
        fail, skipped = _kernels.bernard_march(
            np.asarray(x0_hat[i], dtype=float), np.ascontiguousarray(outputs[i, :, 0], dtype=float),
            np.ascontiguousarray(inputs[i, :, 0], dtype=float), t_s, np.array(cfg.lambda_stars),
            cfg.integrand == "printed", t_ref, w_ref, cfg.jacobian_fd_step, plant.params.substrate_feed,
            cfg.substeps, cfg.max_substeps, cfg.stability_target, SINGULAR_PIVOT, est[i],
        )
        cfg.skipped += int(skipped)
        if fail:
            diverged[i] = (int(fail), "explicit KKL estimate diverged")
            log.warning("trajectory %d diverged at sample %d: explicit KKL estimate diverged", i, fail)
    return est, diverged


def run_bernard(plant, cfg, outputs, inputs, x0_hat, t_s):
    """Returns ``(estimates, diverged)``; see :func:`march`."""
    if plant.name != "bioreactor":
        raise ValueError("the explicit KKL observer exists only for the bioreactor")
    if cfg.compiled:
        est, diverged = _bernard_compiled(plant, cfg, outputs, inputs, x0_hat, t_s)
    else:

        def step(x, _, k, rows):
            return bernard_observer_step(plant, cfg, x, outputs[rows, k], inputs[rows, k], t_s), None

        est, _, diverged = march(step, x0_hat, outputs.shape[1])
    if cfg.skipped:
        log.info("explicit KKL observer skipped the injection %d times", cfg.skipped)
    return est, diverged
