"""Discrete KKL observer ``z+ = z + t_s (A z + B y + omega(z) u)``.

``A`` is always diagonal with strictly negative entries, so it is stored as
the vector of decay rates ``eigenvalues`` (``A = -diag(eigenvalues)``).
``omega`` is any callable mapping ``z`` to an ``(n_z, n_u)`` matrix.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError, ModelEvaluationError
from .numerics import rk4_step

DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class ObserverConfig:
    eigenvalues: np.ndarray
    B: np.ndarray
    t_s: float
    n_u: int = 1

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).ravel()
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.shape[0] != lam.size and B.shape[1] == lam.size:
            B = B.T
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "B", B)
        if not np.all(lam > 0):
            raise ConfigError("observer eigenvalues must be strictly positive (A Hurwitz)")
        if not self.t_s > 0:
            raise ConfigError("sampling time must be positive")
        if not self.t_s * lam.max() < 2.0:
            raise ConfigError(f"I + t_s A is not Schur stable: t_s * max(lambda) = {self.t_s * lam.max():.3g} >= 2")
        if B.shape[0] != lam.size or not np.all(np.isfinite(B)):
            raise ConfigError(f"B must be a finite {lam.size} x n_y matrix, got shape {B.shape}")

    @classmethod
    def with_ones(cls, eigenvalues, n_y, t_s, n_u=1):
        """Config with ``B`` an all-ones ``n_z x n_y`` matrix."""
        return cls(np.asarray(eigenvalues, dtype=float), np.ones((len(eigenvalues), n_y)), t_s, n_u)

    @property
    def n_z(self):
        return self.eigenvalues.size

    @property
    def n_y(self):
        return self.B.shape[1]

    @property
    def A(self):
        return np.diag(-self.eigenvalues)

    def with_sampling_time(self, t_s):
        return ObserverConfig(self.eigenvalues, self.B, t_s, self.n_u)


def zero_omega(cfg):
    """The ``omega = 0`` stub."""
    zeros = np.zeros((cfg.n_z, cfg.n_u))
    return lambda z: zeros


def _injection(cfg, z, y, u, omega):
    w = np.asarray(omega(z), dtype=float)
    if w.shape != (cfg.n_z, cfg.n_u) or not np.all(np.isfinite(w)):
        raise ModelEvaluationError(f"omega returned shape {w.shape} or non-finite entries")
    return -cfg.eigenvalues * z + cfg.B @ y + w @ u


def observer_step(cfg, z, y, u, omega):
    """One forward-Euler step of the observer."""
    z = np.asarray(z, dtype=float)
    return z + cfg.t_s * _injection(cfg, z, np.asarray(y, dtype=float), np.asarray(u, dtype=float), omega)


def rollout(cfg, outputs, inputs, omega, z0=None, z_bound=None):
    """Run the discrete observer over a sampled trajectory.

    Row ``k`` of the result is ``z_k``; row 0 is ``z0`` (zero by default).
    When ``z_bound`` is given, ``||z_k|| > 10 * z_bound`` raises
    :class:`DivergenceError`.
    """
    outputs = np.asarray(outputs, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    N = outputs.shape[0]
    if N < 1:
        raise ValueError("trajectory needs at least one sample")
    Z = np.empty((N, cfg.n_z))
    Z[0] = np.zeros(cfg.n_z) if z0 is None else z0
    limit = None if z_bound is None else DIVERGENCE_FACTOR * z_bound
    for k in range(N - 1):
        Z[k + 1] = observer_step(cfg, Z[k], outputs[k], inputs[k], omega)
        if limit is not None and not np.linalg.norm(Z[k + 1]) <= limit:
            raise DivergenceError(f"observer state norm exceeded {limit:.3g} at step {k + 1}", index=k + 1)
    return Z


def batched_rollout(cfg, outputs, inputs, omega_batch, z0=None, z_bound=None):
    """Rollout of many trajectories at once.

    ``outputs`` is ``(M, N, n_y)`` and ``inputs`` ``(M, N, n_u)``;
    ``omega_batch`` maps ``(M, n_z)`` to ``(M, n_z, n_u)``.  Returns
    ``(M, N, n_z)``.
    """
    outputs = np.asarray(outputs, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    M, N = outputs.shape[:2]
    Z = np.empty((M, N, cfg.n_z))
    Z[:, 0] = 0.0 if z0 is None else z0
    decay = 1.0 - cfg.t_s * cfg.eigenvalues
    drive = cfg.t_s * (outputs @ cfg.B.T)
    for k in range(N - 1):
        w = omega_batch(Z[:, k])
        if not np.all(np.isfinite(w)):
            raise ModelEvaluationError(f"omega returned non-finite entries at step {k}")
        Z[:, k + 1] = decay * Z[:, k] + drive[:, k] + cfg.t_s * np.einsum("mij,mj->mi", w, inputs[:, k])
    if z_bound is not None:
        _check_bound(Z, DIVERGENCE_FACTOR * z_bound)
    return Z


def _check_bound(Z, limit):
    norms = np.linalg.norm(Z, axis=-1)
    bad = ~(norms <= limit)
    if np.any(bad):
        k = int(np.argmax(bad.reshape(-1, bad.shape[-1]).any(axis=0)))
        raise DivergenceError(f"observer state norm exceeded {limit:.3g} at step {k}", index=k)


def continuous_reference_rollout(cfg, outputs, inputs, omega, z0=None, substeps=32):
    """Integrate ``dz/dt = A z + B y(t) + omega(z) u(t)`` with RK4 between samples.

    ``y`` is interpolated linearly between samples and ``u`` is held, which is
    the continuous signal the Euler rollout samples.  Returns ``z`` at the
    sample instants.
    """
    outputs = np.asarray(outputs, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    N = outputs.shape[0]
    t_s = cfg.t_s
    Z = np.empty((N, cfg.n_z))
    Z[0] = np.zeros(cfg.n_z) if z0 is None else z0
    h = t_s / substeps
    for k in range(N - 1):
        y0, y1, u = outputs[k], outputs[k + 1], inputs[k]
        t0 = k * t_s

        def deriv(z, t):
            y = y0 + (t - t0) / t_s * (y1 - y0)
            return _injection(cfg, z, y, u, omega)

        z = Z[k]
        for j in range(substeps):
            z = rk4_step(deriv, z, t0 + j * h, h)
        Z[k + 1] = z
    return Z


def lyapunov_weights(cfg):
    """Diagonal ``P`` solving ``(I + t_s A)^T P (I + t_s A) - P = -t_s I``."""
    a = 1.0 - cfg.t_s * cfg.eigenvalues
    return cfg.t_s / (1.0 - a * a)


def ultimate_bound(cfg, y_bound, u_bound, omega_bound, z0_norm=0.0):
    """Ultimate bound on ``||z_k||`` from the discrete Lyapunov function ``z^T P z``.

    With ``c = ||B|| Y + M_omega U`` the Lyapunov difference is negative once
    ``||z|| >= r = L1 + sqrt(L1^2 + t_s L2^2)`` where
    ``L1 = c ||P|| ||I + t_s A||`` and ``L2^2 = ||P|| c^2``.  Trajectories then
    remain inside the ``P``-ellipsoid reached in one step from the ball of
    radius ``max(r, ||z0||)``, whose Euclidean radius is returned.
    """
    p = lyapunov_weights(cfg)
    p_max, p_min = p.max(), p.min()
    step_gain = np.max(np.abs(1.0 - cfg.t_s * cfg.eigenvalues))
    c = np.linalg.norm(cfg.B, 2) * y_bound + omega_bound * u_bound
    L1 = c * p_max * step_gain
    L2_sq = p_max * c * c
    r = L1 + np.sqrt(L1 * L1 + cfg.t_s * L2_sq)
    reach = step_gain * max(r, z0_norm) + cfg.t_s * c
    return float(np.sqrt(p_max / p_min) * max(reach, z0_norm))
