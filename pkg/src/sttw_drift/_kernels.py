"""Compiled scalar kernels for the drifting single-track model.

Everything here works on flat float64 arrays so numba can compile it:

    x = [delta, phi, phi_dot, psi_dot, omega_f]
    u = [delta_dot, omega_r]
    p = parameter vector, see the P_* index constants

Body frame: x along the wheelbase line on the ground, z pointing down, rotating
with the yaw rate only. The public, typed API lives in ``dynamics.py``.
"""

import math

import numpy as np
from numba import njit

P_M, P_IXX, P_IZZ, P_IF, P_IR, P_A, P_B, P_C, P_H, P_R, P_LAM, P_MU, P_G = range(13)
N_PARAMS = 13

EPS_SLIP = 1e-4  # [m/s] floor on the rear slip speed used for the friction direction
COND_LIMIT = 1e12

OK = 0
ENVELOPE = 1
LIFTOFF = 2
ILL_CONDITIONED = 3
NONFINITE = 4

STATUS_NAMES = {
    OK: "ok",
    ENVELOPE: "envelope",
    LIFTOFF: "liftoff",
    ILL_CONDITIONED: "ill_conditioned",
    NONFINITE: "nonfinite",
}

_HALF_PI = 0.5 * math.pi


@njit(cache=True)
def project_steering(delta, phi, lam):
    return math.atan(math.tan(delta) * math.cos(lam) / math.cos(phi))


@njit(cache=True)
def unproject_steering(delta_f, phi, lam):
    return math.atan(math.tan(delta_f) * math.cos(phi) / math.cos(lam))


@njit(cache=True)
def steering_rate(delta, delta_dot, phi, phi_dot, lam):
    # d/dt of tan(delta_f) cos(phi) = tan(delta) cos(lam)
    delta_f = project_steering(delta, phi, lam)
    tdf = math.tan(delta_f)
    sec2d = 1.0 + math.tan(delta) ** 2
    sec2df = 1.0 + tdf * tdf
    return (sec2d * math.cos(lam) * delta_dot + tdf * math.sin(phi) * phi_dot) / (sec2df * math.cos(phi))


@njit(cache=True)
def rear_velocity(psi_dot, omega_f, delta_f, b, r):
    v_rx = -omega_f * r * math.cos(delta_f)
    v_ry = -psi_dot * b - omega_f * r * math.sin(delta_f)
    return v_rx, v_ry


@njit(cache=True)
def _kin_terms(x, u, p):
    """Acceleration-independent kinematic terms shared by every residual evaluation.

    Returns (delta_f, sin delta_f, cos delta_f, delta_f_dot, sin phi, cos phi, v_rx, v_ry).
    """
    delta, phi, phi_dot, psi_dot, omega_f = x[0], x[1], x[2], x[3], x[4]
    lam = p[P_LAM]
    sp, cp = math.sin(phi), math.cos(phi)
    td = math.tan(delta)
    tdf = td * math.cos(lam) / cp
    delta_f = math.atan(tdf)
    sec2df = 1.0 + tdf * tdf
    cf = 1.0 / math.sqrt(sec2df)
    sf = tdf * cf
    # d/dt of tan(delta_f) cos(phi) = tan(delta) cos(lam)
    delta_f_dot = ((1.0 + td * td) * math.cos(lam) * u[0] + tdf * sp * phi_dot) / (sec2df * cp)
    v_rx = -omega_f * p[P_R] * cf
    v_ry = -psi_dot * p[P_B] - omega_f * p[P_R] * sf
    return delta_f, sf, cf, delta_f_dot, sp, cp, v_rx, v_ry


@njit(cache=True)
def _com_from_terms(x, p, sf, cf, delta_f_dot, sp, cp, v_rx, v_ry, acc0, acc1, acc2):
    phi_dot, psi_dot, omega_f = x[2], x[3], x[4]
    phi_dd, psi_dd, omega_f_dot = acc0, acc1, acc2
    a, b, h, r = p[P_A], p[P_B], p[P_H], p[P_R]
    # body-component derivatives of the rear contact velocity
    dv_rx = -omega_f_dot * r * cf + omega_f * r * sf * delta_f_dot
    dv_ry = -psi_dd * b - omega_f_dot * r * sf - omega_f * r * cf * delta_f_dot
    # r_rg = (a, h sp, -h cp); v_g = v_r + d(r_rg)/dt + w x r_rg, w = (0, 0, psi_dot)
    v_gx = v_rx - psi_dot * h * sp
    v_gy = v_ry + h * cp * phi_dot + psi_dot * a
    v_gz = h * sp * phi_dot
    dv_gx = dv_rx - psi_dd * h * sp - psi_dot * h * cp * phi_dot
    dv_gy = dv_ry - h * sp * phi_dot * phi_dot + h * cp * phi_dd + psi_dd * a
    dv_gz = h * cp * phi_dot * phi_dot + h * sp * phi_dd
    # a_g = dv_g/dt + w x v_g
    a_gx = dv_gx - psi_dot * v_gy
    a_gy = dv_gy + psi_dot * v_gx
    a_gz = dv_gz
    return v_gx, v_gy, v_gz, a_gx, a_gy, a_gz


@njit(cache=True)
def _forces_from_terms(x, u, p, sf, cf, delta_f_dot, sp, cp, v_rx, v_ry, acc0, acc1, acc2):
    m, a, b, h, r, mu, g = p[P_M], p[P_A], p[P_B], p[P_H], p[P_R], p[P_MU], p[P_G]
    _, _, _, a_gx, a_gy, a_gz = _com_from_terms(x, p, sf, cf, delta_f_dot, sp, cp, v_rx, v_ry, acc0, acc1, acc2)
    n_f = (m * a * (g - a_gz) - m * h * a_gx * cp) / b
    n_r = (m * (b - a) * (g - a_gz) + m * h * a_gx * cp) / b
    slip_x = v_rx + u[1] * r
    slip_y = v_ry
    slip = math.sqrt(slip_x * slip_x + slip_y * slip_y)
    denom = max(slip, EPS_SLIP)
    f_rx = -mu * slip_x * n_r / denom
    f_ry = -mu * slip_y * n_r / denom
    f_fx = m * a_gx - f_rx
    f_fy = m * a_gy - f_ry
    return n_f, n_r, f_fx, f_fy, f_rx, f_ry, a_gx, a_gy, a_gz, slip


@njit(cache=True)
def _eom_from_terms(x, u, p, sf, cf, delta_f_dot, sp, cp, v_rx, v_ry, acc0, acc1, acc2):
    n_f, n_r, f_fx, f_fy, f_rx, f_ry, _, _, _, _ = _forces_from_terms(
        x, u, p, sf, cf, delta_f_dot, sp, cp, v_rx, v_ry, acc0, acc1, acc2
    )
    h, r, a, b = p[P_H], p[P_R], p[P_A], p[P_B]
    psi_dot = x[3]
    res0 = p[P_IXX] * acc0 - ((n_f + n_r) * h * sp - (f_ry + f_fy) * h * cp + p[P_IR] * u[1] * psi_dot * cp)
    res1 = p[P_IZZ] * acc1 - ((f_fx + f_rx) * h * sp + f_fy * (b - a) - f_ry * a)
    res2 = p[P_IF] * acc2 - (f_fx * r * cf + f_fy * r * sf)
    return res0, res1, res2, n_f, n_r


@njit(cache=True)
def com_kinematics(x, u, acc0, acc1, acc2, p):
    """Velocity and acceleration of the COM in body components.

    Returns (v_gx, v_gy, v_gz, a_gx, a_gy, a_gz, v_rx, v_ry, delta_f).
    """
    delta_f, sf, cf, dfd, sp, cp, v_rx, v_ry = _kin_terms(x, u, p)
    v_gx, v_gy, v_gz, a_gx, a_gy, a_gz = _com_from_terms(x, p, sf, cf, dfd, sp, cp, v_rx, v_ry, acc0, acc1, acc2)
    return v_gx, v_gy, v_gz, a_gx, a_gy, a_gz, v_rx, v_ry, delta_f


@njit(cache=True)
def contact_forces(x, u, acc0, acc1, acc2, p):
    """Contact forces at a candidate acceleration.

    Returns (N_f, N_r, f_fx, f_fy, f_rx, f_ry, a_gx, a_gy, a_gz, slip, delta_f).
    The slip speed used for the friction direction is floored at EPS_SLIP.
    """
    delta_f, sf, cf, dfd, sp, cp, v_rx, v_ry = _kin_terms(x, u, p)
    out = _forces_from_terms(x, u, p, sf, cf, dfd, sp, cp, v_rx, v_ry, acc0, acc1, acc2)
    return out[0], out[1], out[2], out[3], out[4], out[5], out[6], out[7], out[8], out[9], delta_f


@njit(cache=True)
def eom_residual(x, u, acc0, acc1, acc2, p):
    """Roll, yaw and front-wheel balance residuals (lhs - rhs) at a candidate acceleration.

    Returns (res_roll, res_yaw, res_wheel, N_f, N_r).
    """
    _, sf, cf, dfd, sp, cp, v_rx, v_ry = _kin_terms(x, u, p)
    return _eom_from_terms(x, u, p, sf, cf, dfd, sp, cp, v_rx, v_ry, acc0, acc1, acc2)


@njit(cache=True)
def mass_system(x, u, p, mass, forcing, n0, dn):
    """Extract M and F of M acc = F from the acceleration-affine residual.

    Also returns the normal forces at zero acceleration (n0) and their
    sensitivities to each acceleration component (dn[:, j]).
    """
    r0, r1, r2, nf0, nr0 = eom_residual(x, u, 0.0, 0.0, 0.0, p)
    forcing[0] = -r0
    forcing[1] = -r1
    forcing[2] = -r2
    n0[0] = nf0
    n0[1] = nr0
    for j in range(3):
        e0 = 1.0 if j == 0 else 0.0
        e1 = 1.0 if j == 1 else 0.0
        e2 = 1.0 if j == 2 else 0.0
        s0, s1, s2, nf, nr = eom_residual(x, u, e0, e1, e2, p)
        mass[0, j] = s0 - r0
        mass[1, j] = s1 - r1
        mass[2, j] = s2 - r2
        dn[0, j] = nf - nf0
        dn[1, j] = nr - nr0


@njit(cache=True)
def derivative(x, u, p, xdot):
    """State derivative; returns a status code (OK on success)."""
    for i in range(5):
        if not math.isfinite(x[i]):
            return NONFINITE
    if not (math.isfinite(u[0]) and math.isfinite(u[1])):
        return NONFINITE
    if abs(x[0]) >= _HALF_PI or abs(x[1]) >= _HALF_PI:
        return ENVELOPE
    _, sf, cf, dfd, sp, cp, v_rx, v_ry = _kin_terms(x, u, p)
    r0, r1, r2, nf0, nr0 = _eom_from_terms(x, u, p, sf, cf, dfd, sp, cp, v_rx, v_ry, 0.0, 0.0, 0.0)
    a0, a1, a2, nfa, nra = _eom_from_terms(x, u, p, sf, cf, dfd, sp, cp, v_rx, v_ry, 1.0, 0.0, 0.0)
    b0, b1, b2, nfb, nrb = _eom_from_terms(x, u, p, sf, cf, dfd, sp, cp, v_rx, v_ry, 0.0, 1.0, 0.0)
    c0, c1, c2, nfc, nrc = _eom_from_terms(x, u, p, sf, cf, dfd, sp, cp, v_rx, v_ry, 0.0, 0.0, 1.0)
    # columns of M
    m00, m10, m20 = a0 - r0, a1 - r1, a2 - r2
    m01, m11, m21 = b0 - r0, b1 - r1, b2 - r2
    m02, m12, m22 = c0 - r0, c1 - r1, c2 - r2
    f0, f1, f2 = -r0, -r1, -r2
    # Cramer's rule
    k00 = m11 * m22 - m12 * m21
    k01 = m12 * m20 - m10 * m22
    k02 = m10 * m21 - m11 * m20
    det = m00 * k00 + m01 * k01 + m02 * k02
    scale = abs(m00 * m11 * m22)
    if det == 0.0 or abs(det) < scale / COND_LIMIT:
        return ILL_CONDITIONED
    acc0 = (k00 * f0 + (m02 * m21 - m01 * m22) * f1 + (m01 * m12 - m02 * m11) * f2) / det
    acc1 = (k01 * f0 + (m00 * m22 - m02 * m20) * f1 + (m02 * m10 - m00 * m12) * f2) / det
    acc2 = (k02 * f0 + (m01 * m20 - m00 * m21) * f1 + (m00 * m11 - m01 * m10) * f2) / det
    xdot[0] = u[0]
    xdot[1] = x[2]
    xdot[2] = acc0
    xdot[3] = acc1
    xdot[4] = acc2
    for i in range(5):
        if not math.isfinite(xdot[i]):
            return NONFINITE
    n_f = nf0 + (nfa - nf0) * acc0 + (nfb - nf0) * acc1 + (nfc - nf0) * acc2
    n_r = nr0 + (nra - nr0) * acc0 + (nrb - nr0) * acc1 + (nrc - nr0) * acc2
    if n_f < 0.0 or n_r < 0.0:
        return LIFTOFF
    return OK


@njit(cache=True)
def pose_rates(psi, v_rx, v_ry, psi_dot, out):
    c, s = math.cos(psi), math.sin(psi)
    out[0] = v_rx * c - v_ry * s
    out[1] = v_rx * s + v_ry * c
    out[2] = psi_dot


@njit(cache=True)
def full_derivative(z, u, p, zdot):
    """Derivative of the 8-vector (state, X, Y, psi)."""
    status = derivative(z[:5], u, p, zdot[:5])
    if status != OK:
        return status
    delta_f = project_steering(z[0], z[1], p[P_LAM])
    v_rx, v_ry = rear_velocity(z[3], z[4], delta_f, p[P_B], p[P_R])
    pose_rates(z[7], v_rx, v_ry, z[3], zdot[5:])
    return OK


@njit(cache=True)
def rk4_step(x, u, dt, p, out):
    """One RK4 step of the 5-state model with u held constant."""
    n = 5
    work = np.empty((5, n))
    k1, k2, k3, k4, tmp = work[0], work[1], work[2], work[3], work[4]
    s = derivative(x, u, p, k1)
    if s != OK:
        return s
    for i in range(n):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    s = derivative(tmp, u, p, k2)
    if s != OK:
        return s
    for i in range(n):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    s = derivative(tmp, u, p, k3)
    if s != OK:
        return s
    for i in range(n):
        tmp[i] = x[i] + dt * k3[i]
    s = derivative(tmp, u, p, k4)
    if s != OK:
        return s
    for i in range(n):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return OK


@njit(cache=True)
def rk4_step_full(z, u, dt, p, out):
    """One RK4 step of the 8-vector (state and world pose)."""
    n = 8
    work = np.empty((5, n))
    k1, k2, k3, k4, tmp = work[0], work[1], work[2], work[3], work[4]
    s = full_derivative(z, u, p, k1)
    if s != OK:
        return s
    for i in range(n):
        tmp[i] = z[i] + 0.5 * dt * k1[i]
    s = full_derivative(tmp, u, p, k2)
    if s != OK:
        return s
    for i in range(n):
        tmp[i] = z[i] + 0.5 * dt * k2[i]
    s = full_derivative(tmp, u, p, k3)
    if s != OK:
        return s
    for i in range(n):
        tmp[i] = z[i] + dt * k3[i]
    s = full_derivative(tmp, u, p, k4)
    if s != OK:
        return s
    for i in range(n):
        out[i] = z[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return OK


@njit(cache=True)
def rollout(x0, us, dt, p, xs):
    """Integrate one RK4 step per input row; returns the first failing index or -1."""
    xs[0, :] = x0
    for k in range(us.shape[0]):
        if rk4_step(xs[k], us[k], dt, p, xs[k + 1]) != OK:
            return k
    return -1


@njit(cache=True)
def linearize_step(x, u, dt, p, eps, a_out, b_out):
    """Central-difference Jacobians of the RK4 map; returns a status code."""
    work = np.empty((4, 5))
    xp, xm, fp, fm = work[0], work[1], work[2], work[3]
    up = np.empty(2)
    for j in range(5):
        xp[:] = x
        xm[:] = x
        xp[j] += eps
        xm[j] -= eps
        s = rk4_step(xp, u, dt, p, fp)
        if s != OK:
            return s
        s = rk4_step(xm, u, dt, p, fm)
        if s != OK:
            return s
        for i in range(5):
            a_out[i, j] = (fp[i] - fm[i]) / (2.0 * eps)
    for j in range(2):
        up[:] = u
        up[j] += eps
        s = rk4_step(x, up, dt, p, fp)
        if s != OK:
            return s
        up[j] -= 2.0 * eps
        s = rk4_step(x, up, dt, p, fm)
        if s != OK:
            return s
        for i in range(5):
            b_out[i, j] = (fp[i] - fm[i]) / (2.0 * eps)
    return OK


@njit(cache=True)
def linearize_trajectory(xs, us, dt, p, eps, a_out, b_out):
    for k in range(us.shape[0]):
        s = linearize_step(xs[k], us[k], dt, p, eps, a_out[k], b_out[k])
        if s != OK:
            return s
    return OK


@njit(cache=True)
def adesa_kernel(delta_ss, psi_dot_ss, eps, max_iter, p):
    """Geometric fixed-point equilibrium solve for psi_dot_ss > 0.

    Returns (status, iterations, delta, phi, omega_f, omega_r, delta_f,
    rear_angle, R_r, v_r) where status is 0 converged, 1 geometrically
    infeasible, 2 not converged, 3 singular sideslip. ``rear_angle`` is the
    angle at the rear contact between the wheelbase and the turn centre.
    """
    m, b, h, r = p[P_M], p[P_B], p[P_H], p[P_R]
    mu, g, lam, i_r = p[P_MU], p[P_G], p[P_LAM], p[P_IR]
    w = psi_dot_ss
    radius = mu * g / (w * w)
    speed = w * radius
    delta_f = delta_ss
    alpha = 1.0
    last_err = math.inf
    delta = phi = omega_f = omega_r = rear_angle = math.nan
    for it in range(1, max_iter + 1):
        ratio = b * math.cos(delta_f) / radius
        if abs(ratio) > 1.0:
            return 1, it, delta, phi, omega_f, omega_r, delta_f, rear_angle, radius, speed
        rear_angle = _HALF_PI + delta_f - math.asin(ratio)
        s_r = math.sin(rear_angle)
        if s_r <= 1e-9:
            return 3, it, delta, phi, omega_f, omega_r, delta_f, rear_angle, radius, speed
        v_rx = speed * s_r
        omega_r = -speed / (r * s_r)
        omega_f = -v_rx / (r * math.cos(delta_f))
        phi = (m * h * w * v_rx - i_r * omega_r * w) / (m * h * h * w * w + m * g * h)
        delta = math.atan(math.tan(delta_f) * math.cos(phi) / math.cos(lam))
        err = delta - delta_ss
        if abs(err) <= eps:
            return 0, it, delta, phi, omega_f, omega_r, delta_f, rear_angle, radius, speed
        # halve the gain whenever the error grows
        if abs(err) > abs(last_err):
            alpha *= 0.5
        last_err = err
        delta_f = delta_f - alpha * err
    return 2, max_iter, delta, phi, omega_f, omega_r, delta_f, rear_angle, radius, speed
