"""A KKL observer on the scalar plant dx/dt = -x, y = x.

The observer z' = A z + B y with A = diag(-3, -6) and B = [1, 1] has no
input term here.  Its state converges to T x with T solving the Sylvester
equation T * (-1) = A T + B, i.e. T = [1/2, 1/5], so x is recovered by the
left inverse of T.  The second half measures how the forward-Euler
discretization error shrinks with the sampling time once a random input
term omega(z) u is switched on.
"""

import numpy as np

from nlox.evaluation import discretization_probe
from nlox.neural import init_params
from nlox.observer import ObserverConfig, rollout, zero_omega
from nlox.training import NloxModel

t_s = 0.001
cfg = ObserverConfig.with_ones([3.0, 6.0], n_y=1, t_s=t_s)

T = np.linalg.solve(np.diag([3.0, 6.0]) - np.eye(2), np.ones(2))
print("T from the Sylvester equation:", T)

t = np.arange(5001) * t_s
x = 0.8 * np.exp(-t)
Z = rollout(cfg, x[:, None], np.zeros((t.size, 1)), zero_omega(cfg))

# least-squares left inverse of the column T
x_hat = Z @ T / (T @ T)
gap = np.linalg.norm(Z - np.outer(x, T), axis=1)
for time in (0.0, 0.5, 1.0, 2.0, 5.0):
    k = int(round(time / t_s))
    print(f"t = {time:3.1f}   x = {x[k]:.5f}   x_hat = {x_hat[k]:.5f}   |z - T x| = {gap[k]:.2e}")

# Euler order with a random input term
coarse = ObserverConfig.with_ones([3.0, 6.0], n_y=1, t_s=0.1)
omega = NloxModel(coarse, init_params([2, 8, 8, 2], seed=5), []).omega_fn()
rng = np.random.default_rng(0)
y = np.sin(0.3 * np.arange(100))[:, None]
u = rng.lognormal(np.log(0.4), 0.4, size=(100, 1))
probe = discretization_probe(coarse, omega, y, u)
print()
print("t_s       max |z_euler - z_exact|")
for step, err in zip(probe.t_s, probe.errors):
    print(f"{step:<9g} {err:.3e}")
print(f"log-log slope {probe.slope:.3f} (first order means 1)")
