"""Compiled pieces of the iterative LQ solver: cost, Riccati backward pass, forward pass."""

import numpy as np
from numba import njit

from sttw_drift._kernels import OK, rk4_step


@njit(cache=True)
def _excess(v, lo, hi):
    if v > hi:
        return v - hi
    if v < lo:
        return v - lo
    return 0.0


@njit(cache=True)
def trajectory_cost(xs, us, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, w):
    """Penalized quadratic tracking cost of a state/input trajectory."""
    n_steps = us.shape[0]
    total = 0.0
    for k in range(n_steps + 1):
        dx = xs[k] - xr[k]
        W = QT if k == n_steps else Q
        total += dx @ (W @ dx)
        for i in range(5):
            e = _excess(xs[k, i], xlo[i], xhi[i])
            total += w * e * e
        if k < n_steps:
            du = us[k] - ur[k]
            total += du @ (R @ du)
            for i in range(2):
                e = _excess(us[k, i], ulo[i], uhi[i])
                total += w * e * e
    return total


@njit(cache=True)
def backward_pass(A, B, xs, us, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, w, reg, Kfb, kff):
    """Riccati recursion of the Gauss-Newton LQ subproblem.

    Fills feedback gains Kfb (N, 2, 5) and feedforward steps kff (N, 2).
    Returns (failed_index, dV1, dV2) where failed_index is -1 on success and
    dV1 + dV2 is the model-predicted cost change of a full step.
    """
    n_steps = us.shape[0]
    dx = xs[n_steps] - xr[n_steps]
    Vx = 2.0 * (QT @ dx)
    Vxx = 2.0 * QT.copy()
    for i in range(5):
        e = _excess(xs[n_steps, i], xlo[i], xhi[i])
        if e != 0.0:
            Vx[i] += 2.0 * w * e
            Vxx[i, i] += 2.0 * w
    dV1 = 0.0
    dV2 = 0.0
    for k in range(n_steps - 1, -1, -1):
        dx = xs[k] - xr[k]
        du = us[k] - ur[k]
        lx = 2.0 * (Q @ dx)
        lxx = 2.0 * Q.copy()
        for i in range(5):
            e = _excess(xs[k, i], xlo[i], xhi[i])
            if e != 0.0:
                lx[i] += 2.0 * w * e
                lxx[i, i] += 2.0 * w
        lu = 2.0 * (R @ du)
        luu = 2.0 * R.copy()
        for i in range(2):
            e = _excess(us[k, i], ulo[i], uhi[i])
            if e != 0.0:
                lu[i] += 2.0 * w * e
                luu[i, i] += 2.0 * w
        At = A[k].T
        Bt = B[k].T
        Qx = lx + At @ Vx
        Qu = lu + Bt @ Vx
        VA = Vxx @ A[k]
        Qxx = lxx + At @ VA
        Qux = Bt @ VA
        Quu = luu + Bt @ (Vxx @ B[k])
        h00 = Quu[0, 0] + reg
        h11 = Quu[1, 1] + reg
        h01 = 0.5 * (Quu[0, 1] + Quu[1, 0])
        det = h00 * h11 - h01 * h01
        if not (h00 > 0.0 and det > 0.0):
            return k, 0.0, 0.0
        inv = np.empty((2, 2))
        inv[0, 0] = h11 / det
        inv[1, 1] = h00 / det
        inv[0, 1] = -h01 / det
        inv[1, 0] = -h01 / det
        kk = -(inv @ Qu)
        KK = -(inv @ Qux)
        kff[k] = kk
        Kfb[k] = KK
        dV1 += kk @ Qu
        dV2 += 0.5 * (kk @ (Quu @ kk))
        Vx = Qx + KK.T @ (Quu @ kk) + KK.T @ Qu + Qux.T @ kk
        Vxx = Qxx + KK.T @ (Quu @ KK) + KK.T @ Qux + Qux.T @ KK
        Vxx = 0.5 * (Vxx + Vxx.T)
    return -1, dV1, dV2


@njit(cache=True)
def forward_pass(x0, xs, us, Kfb, kff, alpha, dt, p, xs_new, us_new):
    """Closed-loop rollout of the updated policy; returns the failing step or -1."""
    xs_new[0] = x0
    dx = np.empty(5)
    for k in range(us.shape[0]):
        for i in range(5):
            dx[i] = xs_new[k, i] - xs[k, i]
        for j in range(2):
            v = us[k, j] + alpha * kff[k, j]
            for i in range(5):
                v += Kfb[k, j, i] * dx[i]
            us_new[k, j] = v
        if rk4_step(xs_new[k], us_new[k], dt, p, xs_new[k + 1]) != OK:
            return k
    return -1
