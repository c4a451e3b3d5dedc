"""Benchmark plants: a Contois bioreactor and the Williams-Otto CSTR.

Dynamics functions broadcast over leading axes: ``x`` has shape
``(..., n_x)`` and ``u`` shape ``(..., n_u)``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NumericalError
from .numerics import integrate_interval, solve_linear

CONTOIS_FLOOR = 1e-12
KELVIN_OFFSET = 273.15


@dataclass(frozen=True)
class PlantModel:
    """Numerical plant ``dx/dt = f(x) + g(x) u``, ``y = h(x)``.

    ``rhs`` is the full vector field.  ``f`` and ``g`` are only set for plants
    that are genuinely affine in the input.
    """

    name: str
    n_x: int
    n_u: int
    n_y: int
    rhs: Callable
    h: Callable
    state_domain: np.ndarray
    sample_initial_state: Callable
    nominal_input: np.ndarray
    f: Optional[Callable] = None
    g: Optional[Callable] = None
    state_names: tuple = ()
    input_names: tuple = ()
    output_names: tuple = ()
    default_substeps: int = 10
    equilibrium_fn: Optional[Callable] = field(default=None, repr=False)
    params: object = None

    def eval_f(self, x):
        if self.f is None:
            raise NotImplementedError(f"{self.name} has no input-affine split")
        return self.f(np.asarray(x, dtype=float))

    def eval_g(self, x):
        if self.g is None:
            raise NotImplementedError(f"{self.name} has no input-affine split")
        return self.g(np.asarray(x, dtype=float))

    def eval_h(self, x):
        return self.h(np.asarray(x, dtype=float))

    def dynamics(self, x, u):
        return self.rhs(np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def in_domain(self, x, tol=1e-9):
        x = np.asarray(x)
        lo, hi = self.state_domain[:, 0], self.state_domain[:, 1]
        return np.all(np.isfinite(x), axis=-1) & np.all((x > lo - tol) & (x < hi + tol), axis=-1)

    def equilibrium(self, u=None):
        u = self.nominal_input if u is None else np.asarray(u, dtype=float)
        if self.equilibrium_fn is not None:
            return self.equilibrium_fn(u)
        return find_equilibrium(self, u, self.sample_initial_state(np.random.default_rng(0)))


def find_equilibrium(plant, u, x_guess, tol=1e-12, max_iter=100, fd_step=1e-7):
    """Damped Newton iteration on ``rhs(x, u) = 0`` with a finite-difference Jacobian."""
    x = np.array(x_guess, dtype=float)
    u = np.asarray(u, dtype=float)
    for _ in range(max_iter):
        r = plant.dynamics(x, u)
        norm = np.linalg.norm(r)
        if norm < tol:
            return x
        J = np.empty((plant.n_x, plant.n_x))
        for j in range(plant.n_x):
            e = np.zeros(plant.n_x)
            e[j] = fd_step
            J[:, j] = (plant.dynamics(x + e, u) - plant.dynamics(x - e, u)) / (2 * fd_step)
        dx = solve_linear(J, -r)
        step = 1.0
        while step > 1e-6:
            trial = x + step * dx
            if plant.in_domain(trial, tol=0.0) and np.linalg.norm(plant.dynamics(trial, u)) < norm:
                break
            step *= 0.5
        x = x + step * dx
    if np.linalg.norm(plant.dynamics(x, u)) < 1e3 * tol:
        return x
    raise NumericalError(f"equilibrium search for {plant.name} did not converge")


# ---------------------------------------------------------------- bioreactor


@dataclass(frozen=True)
class BioreactorParams:
    substrate_feed: float = 0.1
    # dilution rate about which deviation variables are taken: mean of the excitation
    nominal_dilution: float = 0.4
    init_low: float = 0.05
    init_high: float = 0.1

    def __post_init__(self):
        if not self.substrate_feed > 0:
            raise ValueError("substrate_feed must be positive")


def contois_mu(x1, x2):
    """Contois growth rate ``x2 / (x1 + x2)``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    denom = x1 + x2
    if np.any(denom <= CONTOIS_FLOOR):
        raise NumericalError("Contois rate is singular: x1 + x2 <= 1e-12")
    mu = x2 / denom
    return float(mu) if mu.ndim == 0 else mu


def bioreactor_dynamics(x, u, params=BioreactorParams()):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)[..., 0]
    x1, x2 = x[..., 0], x[..., 1]
    growth = contois_mu(x1, x2) * x1
    return np.stack([growth - u * x1, -growth + u * (params.substrate_feed - x2)], axis=-1)


def make_bioreactor(params=BioreactorParams()):
    s_f = params.substrate_feed

    def f(x):
        growth = contois_mu(x[..., 0], x[..., 1]) * x[..., 0]
        return np.stack([growth, -growth], axis=-1)

    def g(x):
        return np.stack([-x[..., 0], s_f - x[..., 1]], axis=-1)[..., None]

    def h(x):
        return x[..., :1]

    def rhs(x, u):
        return bioreactor_dynamics(x, u, params)

    def sample(rng):
        return rng.uniform(params.init_low, params.init_high, size=2)

    def equilibrium(u):
        # xi = x1 + x2 settles at the feed; the growth rate then matches the dilution
        d = float(np.asarray(u).ravel()[0])
        if d >= 1.0:
            return np.array([0.0, s_f])
        return np.array([s_f * (1.0 - d), s_f * d])

    return PlantModel(
        name="bioreactor",
        params=params,
        n_x=2,
        n_u=1,
        n_y=1,
        rhs=rhs,
        h=h,
        f=f,
        g=g,
        state_domain=np.array([[0.0, np.inf], [0.0, np.inf]]),
        sample_initial_state=sample,
        nominal_input=np.array([params.nominal_dilution]),
        state_names=("x1", "x2"),
        input_names=("u",),
        output_names=("y",),
        default_substeps=10,
        equilibrium_fn=equilibrium,
    )


# ------------------------------------------------------------- Williams-Otto

WO_STATES = ("xA", "xB", "xC", "xE", "xG", "xP")


@dataclass(frozen=True)
class WilliamsOttoParams:
    F_A: float = 3.5
    W: float = 2500.0
    F_B_nominal: float = 6.0
    T_R_nominal: float = 100.0
    pre_exponential: tuple = (1.6599e6, 7.2117e8, 2.6745e12)
    activation: tuple = (-6666.67, -8333.33, -11111.0)
    dimensionless_time: bool = True
    x_A0_low: float = 0.2
    x_A0_high: float = 0.6

    @property
    def tau_star(self):
        return self.W / (self.F_A + self.F_B_nominal)


def arrhenius_rates(T_R, params=WilliamsOttoParams()):
    """Rate constants ``(k1, k2, k3)`` in 1/s at reactor temperature ``T_R`` (deg C)."""
    T_R = np.asarray(T_R, dtype=float)
    if np.any(T_R <= -KELVIN_OFFSET):
        raise ValueError("temperature below absolute zero")
    T = T_R + KELVIN_OFFSET
    return tuple(a * np.exp(b / T) for a, b in zip(params.pre_exponential, params.activation))


def williams_otto_dynamics(x, u, params=WilliamsOttoParams()):
    """Six-component mass balance in state order A, B, C, E, G, P.

    With ``params.dimensionless_time`` the derivative is taken with respect
    to ``t / tau_star``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    F_B, T_R = u[..., 0], u[..., 1]
    flow = params.F_A + F_B
    if np.any(flow < 0):
        raise NumericalError("negative total flow F_A + F_B")
    k1, k2, k3 = arrhenius_rates(T_R, params)
    xA, xB, xC, xE, xG, xP = (x[..., i] for i in range(6))
    r1 = k1 * xA * xB
    r2 = k2 * xB * xC
    r3 = k3 * xC * xP
    W = params.W
    dx = np.stack(
        [
            (params.F_A - flow * xA) / W - r1,
            (F_B - flow * xB) / W - r1 - r2,
            -flow * xC / W + 2 * r1 - 2 * r2 - r3,
            -flow * xE / W + 2 * r2,
            -flow * xG / W + 1.5 * r3,
            -flow * xP / W + r2 - 0.5 * r3,
        ],
        axis=-1,
    )
    if params.dimensionless_time:
        dx = dx * params.tau_star
    return dx


def make_williams_otto(params=WilliamsOttoParams()):
    def rhs(x, u):
        return williams_otto_dynamics(x, u, params)

    def h(x):
        return x[..., [3, 5]]

    def sample(rng):
        xA = rng.uniform(params.x_A0_low, params.x_A0_high)
        return np.array([xA, 1.0 - xA, 0.0, 0.0, 0.0, 0.0])

    nominal = np.array([params.F_B_nominal, params.T_R_nominal])

    cache = {}

    def equilibrium(u):
        key = tuple(np.asarray(u, dtype=float).ravel())
        if key not in cache:
            # relax towards the attracting steady state, then polish with Newton
            x0 = np.array([0.4, 0.6, 0.0, 0.0, 0.0, 0.0])
            span = 50.0 if params.dimensionless_time else 50.0 * params.tau_star
            x = integrate_interval(lambda s, t: rhs(s, u), x0, 0.0, span, substeps=20000)
            cache[key] = find_equilibrium(plant, u, x)
        return cache[key].copy()

    plant = PlantModel(
        name="williams_otto",
        params=params,
        n_x=6,
        n_u=2,
        n_y=2,
        rhs=rhs,
        h=h,
        state_domain=np.array([[0.0, 1.0]] * 6),
        sample_initial_state=sample,
        nominal_input=nominal,
        state_names=WO_STATES,
        input_names=("F_B", "T_R"),
        output_names=("xE", "xP"),
        default_substeps=20,
        equilibrium_fn=equilibrium,
    )
    return plant


# -------------------------------------------------------------- disturbances


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str = "none"
    mean: float = 0.0
    stddev: float = 0.0
    target_input_index: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "input_additive_gaussian"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.stddev < 0:
            raise ValueError("stddev must be >= 0")


def apply_disturbance(u_nominal, spec, rng):
    """Add one Gaussian draw per row of ``u_nominal`` to the target channel.

    ``u_nominal`` is a single input vector or an ``(N, n_u)`` staircase.
    """
    u = np.array(u_nominal, dtype=float)
    if spec.kind == "none":
        return u
    rows = u.reshape(-1, u.shape[-1])
    draws = spec.mean + spec.stddev * rng.standard_normal(rows.shape[0])
    rows[:, spec.target_input_index] += draws
    return rows.reshape(u.shape)


def make_plant(name, **overrides):
    if name == "bioreactor":
        return make_bioreactor(BioreactorParams(**overrides))
    if name == "williams_otto":
        return make_williams_otto(WilliamsOttoParams(**overrides))
    raise ValueError(f"unknown plant {name!r}")


def check_domain(plant, x, index):
    if not np.all(plant.in_domain(x)):
        raise DomainError(f"{plant.name} state left its domain at sample {index}", index=index)
