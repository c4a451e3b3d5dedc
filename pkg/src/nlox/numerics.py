"""Fixed-step integration, composite quadrature and small dense solves.

Every routine here works on float64 numpy arrays.  The integrators and the
solver broadcast over leading batch axes so that many trajectories can be
advanced with one call.
"""

from functools import lru_cache

import numpy as np

from .errors import IntegrationError, QuadratureError, SingularMatrixError

PIVOT_FLOOR = 1e-12


def _check_finite(values, t):
    if not np.all(np.isfinite(values)):
        raise IntegrationError(f"non-finite derivative at t={t!r}", t=t)


def rk4_step(deriv, state, t, h):
    """Advance ``state`` by one classical Runge-Kutta step of size ``h``.

    ``deriv(state, t)`` must return an array shaped like ``state``.  Leading
    axes of ``state`` are treated as independent systems.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    state = np.asarray(state, dtype=float)
    k1 = deriv(state, t)
    _check_finite(k1, t)
    k2 = deriv(state + 0.5 * h * k1, t + 0.5 * h)
    _check_finite(k2, t + 0.5 * h)
    k3 = deriv(state + 0.5 * h * k2, t + 0.5 * h)
    _check_finite(k3, t + 0.5 * h)
    k4 = deriv(state + h * k3, t + h)
    _check_finite(k4, t + h)
    return state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_interval(deriv, state, t0, t1, substeps=10):
    """Integrate from ``t0`` to ``t1`` with ``substeps`` equal RK4 steps."""
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = (t1 - t0) / substeps
    x = np.asarray(state, dtype=float)
    for j in range(substeps):
        x = rk4_step(deriv, x, t0 + j * h, h)
    return x


def integrate_interval_checked(deriv, state, t0, t1, substeps=10, rtol=1e-6, atol=1e-9, max_substeps=65536):
    """RK4 over ``[t0, t1]`` with step doubling until the result is resolved.

    The result with ``n`` substeps is accepted once it agrees with the result
    at ``2n`` to ``atol + rtol * |x|`` in every component; otherwise ``n``
    doubles.  Smooth intervals therefore return exactly what
    ``integrate_interval`` would with ``substeps``, while stiff ones are
    refined instead of blowing up.
    """
    def attempt(n):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                x = integrate_interval(deriv, state, t0, t1, n)
        except IntegrationError:
            return None
        return x if np.all(np.isfinite(x)) else None

    n = substeps
    coarse = attempt(n)
    while 2 * n <= max_substeps:
        fine = attempt(2 * n)
        if coarse is not None and fine is not None and np.all(np.abs(coarse - fine) <= atol + rtol * np.abs(fine)):
            return coarse
        coarse, n = fine, 2 * n
    raise IntegrationError(f"interval [{t0}, {t1}] unresolved with {max_substeps} substeps", t=t0)


@lru_cache(maxsize=32)
def _reference_nodes(n):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def composite_nodes(a, b, panels=64, nodes_per_panel=5):
    """Abscissae and weights of the composite Gauss-Legendre rule on [a, b].

    ``a`` and ``b`` may be arrays; the returned nodes have shape
    ``broadcast(a, b).shape + (panels * nodes_per_panel,)`` so a vectorised
    integrand can be evaluated for a whole batch of intervals at once.
    """
    if panels < 1 or nodes_per_panel < 1:
        raise ValueError("panels and nodes_per_panel must be >= 1")
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    ref_x, ref_w = _reference_nodes(nodes_per_panel)
    # local coordinates in [0, 1] of every node, panel-major
    edges = np.arange(panels)[:, None]
    local = ((edges + 0.5 * (ref_x[None, :] + 1.0)) / panels).ravel()
    local_w = np.tile(0.5 * ref_w / panels, panels)
    width = b - a
    return a + width * local, width * local_w


def gauss_legendre(integrand, a, b, panels=64, nodes_per_panel=5):
    """Composite Gauss-Legendre approximation of the integral of ``integrand``.

    The integrand is called once with the full array of abscissae.  Each
    panel integrates polynomials of degree below ``2 * nodes_per_panel``
    exactly.
    """
    if np.any(np.asarray(a) > np.asarray(b)):
        raise ValueError("need a <= b")
    s, w = composite_nodes(a, b, panels, nodes_per_panel)
    values = np.asarray(integrand(s), dtype=float)
    bad = ~np.isfinite(values)
    if np.any(bad):
        where = float(np.broadcast_to(s, values.shape)[bad].flat[0])
        raise QuadratureError(f"non-finite integrand at s={where!r}", abscissa=where)
    result = np.sum(values * w, axis=-1)
    return float(result) if result.ndim == 0 else result


def lu_solve_batched(A, b):
    """Gaussian elimination with partial pivoting over leading batch axes.

    Returns ``(x, min_pivot)`` where ``min_pivot`` is the smallest pivot
    magnitude met per system.  Nothing is raised for singular systems; the
    caller decides what to do with small pivots.
    """
    U = np.array(A, dtype=float)
    rhs = np.array(b, dtype=float)
    n = U.shape[-1]
    if U.shape[-2] != n or rhs.shape[-1] != n:
        raise ValueError(f"shape mismatch: A {U.shape}, b {rhs.shape}")
    batch = np.broadcast_shapes(U.shape[:-2], rhs.shape[:-1])
    U = np.broadcast_to(U, batch + (n, n)).reshape(-1, n, n).copy()
    rhs = np.broadcast_to(rhs, batch + (n,)).reshape(-1, n).copy()
    rows = np.arange(U.shape[0])
    min_pivot = np.full(U.shape[0], np.inf)
    for k in range(n):
        p = k + np.argmax(np.abs(U[:, k:, k]), axis=1)
        swap = p != k
        if np.any(swap):
            r = rows[swap]
            U[r, k], U[r, p[swap]] = U[r, p[swap]].copy(), U[r, k].copy()
            rhs[r, k], rhs[r, p[swap]] = rhs[r, p[swap]].copy(), rhs[r, k].copy()
        piv = U[:, k, k]
        min_pivot = np.minimum(min_pivot, np.abs(piv))
        safe = np.where(piv == 0.0, 1.0, piv)
        if k + 1 < n:
            factors = U[:, k + 1:, k] / safe[:, None]
            U[:, k + 1:, k:] -= factors[:, :, None] * U[:, None, k, k:]
            rhs[:, k + 1:] -= factors * rhs[:, k, None]
    x = np.empty_like(rhs)
    for k in range(n - 1, -1, -1):
        piv = U[:, k, k]
        safe = np.where(piv == 0.0, 1.0, piv)
        x[:, k] = (rhs[:, k] - np.einsum("bj,bj->b", U[:, k, k + 1:], x[:, k + 1:])) / safe
    return x.reshape(batch + (n,)), min_pivot.reshape(batch)


def solve_linear(A, b, pivot_floor=PIVOT_FLOOR):
    """Solve ``A x = b`` by partial-pivoted elimination.

    Raises
    ------
    SingularMatrixError
        If any pivot magnitude is at or below ``pivot_floor``.  The smallest
        pivot is attached to the exception.
    """
    x, min_pivot = lu_solve_batched(A, b)
    smallest = float(np.min(min_pivot))
    if not smallest > pivot_floor:
        raise SingularMatrixError(f"matrix is singular (smallest pivot {smallest:.3e})", pivot=smallest)
    return x
