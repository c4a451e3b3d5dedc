"""Compiled versions of the two sequential sweeps in backpropagation through time.

Layers are passed as numba typed lists.  The results agree with the numpy
sweeps in :mod:`nlox.training` up to floating-point reassociation.
"""

import numpy as np
from numba import njit
from numba.typed import List


def typed(arrays):
    out = List()
    for a in arrays:
        out.append(np.ascontiguousarray(a, dtype=np.float64))
    return out


@njit(cache=True)
def _affine(W, b, x, out):
    for i in range(W.shape[0]):
        acc = b[i]
        for j in range(W.shape[1]):
            acc += W[i, j] * x[j]
        out[i] = acc


@njit(cache=True)
def forward_sweep(Ws, bs, decay, drive, scaled_u, Z, H):
    """Fill ``Z[1:]`` and the hidden activations ``H`` in place."""
    N, n_z = Z.shape
    n_u = scaled_u.shape[1]
    n_hidden = len(Ws) - 1
    W_out = Ws[n_hidden]
    b_out = bs[n_hidden]
    w = np.empty(W_out.shape[0])
    for k in range(N - 1):
        x = Z[k]
        for layer in range(n_hidden):
            h = H[layer][k]
            _affine(Ws[layer], bs[layer], x, h)
            for i in range(h.shape[0]):
                h[i] = np.tanh(h[i])
            x = h
        _affine(W_out, b_out, x, w)
        for i in range(n_z):
            acc = decay[i] * Z[k, i] + drive[k, i]
            for j in range(n_u):
                acc += w[i * n_u + j] * scaled_u[k, j]
            Z[k + 1, i] = acc


@njit(cache=True)
def adjoint_sweep(Ws, decay, scaled_u, grad_z, H, out_deltas, deltas):
    """Backward recursion; fills the per-step layer deltas and returns ``dL/dz_0``."""
    N, n_z = grad_z.shape
    n_u = scaled_u.shape[1]
    n_hidden = len(Ws) - 1
    W_out = Ws[n_hidden]
    a = grad_z[N - 1].copy()
    max_width = W_out.shape[1]
    for layer in range(n_hidden):
        max_width = max(max_width, Ws[layer].shape[1])
    buf = np.empty(max_width)
    nxt = np.empty(max_width)
    for k in range(N - 2, -1, -1):
        og = out_deltas[k]
        for i in range(n_z):
            for j in range(n_u):
                og[i * n_u + j] = a[i] * scaled_u[k, j]
        W = W_out
        width = W.shape[1]
        for c in range(width):
            acc = 0.0
            for r in range(W.shape[0]):
                acc += og[r] * W[r, c]
            buf[c] = acc
        for layer in range(n_hidden - 1, -1, -1):
            h = H[layer][k]
            d = deltas[layer][k]
            for c in range(h.shape[0]):
                d[c] = buf[c] * (1.0 - h[c] * h[c])
            W = Ws[layer]
            width = W.shape[1]
            for c in range(width):
                acc = 0.0
                for r in range(W.shape[0]):
                    acc += d[r] * W[r, c]
                nxt[c] = acc
            for c in range(width):
                buf[c] = nxt[c]
        for i in range(n_z):
            a[i] = grad_z[k, i] + decay[i] * a[i] + buf[i]
    return a


# ------------------------------------------------- explicit bioreactor KKL


@njit(cache=True)
def _bernard_T(x1, xi, lam, printed, t_ref, w_ref):
    if x1 <= 0.0:
        return 0.0
    substrate = xi - x1
    L = np.log(xi / substrate)
    acc = 0.0
    for q in range(t_ref.shape[0]):
        r = substrate * np.exp(L * t_ref[q])
        s = xi - r
        bracket = (substrate / r) * (s / x1)
        weight = 1.0 + 1.0 / r if printed else xi / r
        acc += bracket**lam * weight * r * w_ref[q]
    return acc * L


@njit(cache=True)
def _bernard_gain(x1, x2, lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain):
    """Writes ``(dT/dx)^-1 [1, 1]`` into ``gain``; returns False when skipped."""
    gain[0] = 0.0
    gain[1] = 0.0
    if x1 <= 0.0 or x2 <= 0.0:
        return False
    h1 = fd_step * x1
    h2 = fd_step * x2
    J = np.empty((2, 2))
    for row in range(2):
        lam = lams[row]
        J[row, 0] = (
            _bernard_T(x1 + h1, x1 + h1 + x2, lam, printed, t_ref, w_ref)
            - _bernard_T(x1 - h1, x1 - h1 + x2, lam, printed, t_ref, w_ref)
        ) / (2.0 * h1)
        J[row, 1] = (
            _bernard_T(x1, x1 + x2 + h2, lam, printed, t_ref, w_ref)
            - _bernard_T(x1, x1 + x2 - h2, lam, printed, t_ref, w_ref)
        ) / (2.0 * h2)
    # 2x2 elimination with partial pivoting
    if abs(J[1, 0]) > abs(J[0, 0]):
        a, b, c, d = J[1, 0], J[1, 1], J[0, 0], J[0, 1]
    else:
        a, b, c, d = J[0, 0], J[0, 1], J[1, 0], J[1, 1]
    if abs(a) < pivot_floor:
        return False
    m = c / a
    u22 = d - m * b
    if abs(u22) < pivot_floor:
        return False
    g2 = (1.0 - m) / u22
    gain[1] = g2
    gain[0] = (1.0 - b * g2) / a
    return True


@njit(cache=True)
def _bernard_deriv(x, y, u, s_f, lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain, out):
    """Observer vector field; returns (ok, skipped)."""
    denom = x[0] + x[1]
    if not denom > 1e-12:
        return False, 0
    growth = x[1] / denom * x[0]
    applied = _bernard_gain(x[0], x[1], lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain)
    residual = y - x[0]
    out[0] = growth - u * x[0] + gain[0] * residual
    out[1] = -growth + u * (s_f - x[1]) + gain[1] * residual
    return True, 0 if applied else 1


@njit(cache=True)
def bernard_march(x0, y, u, t_s, lams, printed, t_ref, w_ref, fd_step, s_f,
                  min_substeps, max_substeps, stability_target, pivot_floor, est):
    """Run one trajectory, writing estimates into ``est``.

    Returns ``(failed_sample, skipped)``; ``failed_sample`` is 0 on success.
    """
    N = y.shape[0]
    x = x0.copy()
    gain = np.empty(2)
    k1 = np.empty(2)
    k2 = np.empty(2)
    k3 = np.empty(2)
    k4 = np.empty(2)
    tmp = np.empty(2)
    skipped = 0
    for k in range(N):
        est[k, 0] = x[0]
        est[k, 1] = x[1]
        if k == N - 1:
            break
        applied = _bernard_gain(x[0], x[1], lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain)
        n_sub = min_substeps
        if applied:
            needed = int(np.ceil(t_s * abs(gain[0]) / stability_target))
            n_sub = min(max(min_substeps, needed), max_substeps)
        h = t_s / n_sub
        for _ in range(n_sub):
            ok, sk = _bernard_deriv(x, y[k], u[k], s_f, lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain, k1)
            skipped += sk
            if ok:
                for i in range(2):
                    tmp[i] = x[i] + 0.5 * h * k1[i]
                ok, sk = _bernard_deriv(tmp, y[k], u[k], s_f, lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain, k2)
                skipped += sk
            if ok:
                for i in range(2):
                    tmp[i] = x[i] + 0.5 * h * k2[i]
                ok, sk = _bernard_deriv(tmp, y[k], u[k], s_f, lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain, k3)
                skipped += sk
            if ok:
                for i in range(2):
                    tmp[i] = x[i] + h * k3[i]
                ok, sk = _bernard_deriv(tmp, y[k], u[k], s_f, lams, printed, t_ref, w_ref, fd_step, pivot_floor, gain, k4)
                skipped += sk
            if not ok:
                for j in range(k + 1, N):
                    est[j, 0] = np.nan
                    est[j, 1] = np.nan
                return k + 1, skipped
            for i in range(2):
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if not (np.isfinite(x[0]) and np.isfinite(x[1])):
            for j in range(k + 1, N):
                est[j, 0] = np.nan
                est[j, 1] = np.nan
            return k + 1, skipped
    return 0, skipped
