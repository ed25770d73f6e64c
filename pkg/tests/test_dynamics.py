import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import root

from conftest import random_states
from sttw_drift.dynamics import (
    EPS_SLIP,
    ModelError,
    assemble_eom,
    contact_forces,
    eom_residual,
    mirror_input,
    mirror_state,
    pose_derivative,
    project_steering,
    rear_contact_velocity,
    state_derivative,
    steering_projection_rate,
    unproject_steering,
)
from sttw_drift.params import RobotParams

P = RobotParams()
DEG = math.pi / 180


# steering geometry -----------------------------------------------------------

def test_projection_trivial_cases():
    assert project_steering(0.0, 0.3, P) == 0.0
    no_caster = P.replace(lam=0.0)
    assert project_steering(0.2, 0.0, no_caster) == pytest.approx(0.2, abs=1e-15)


def test_projection_of_fifteen_degrees():
    # atan(tan 15 deg * cos 25 deg) = 13.6497 deg, usually quoted as 13.66
    df = project_steering(15 * DEG, 0.0, P)
    assert df == pytest.approx(math.atan(math.tan(15 * DEG) * math.cos(25 * DEG)), abs=1e-15)
    assert df / DEG == pytest.approx(13.66, abs=0.015)
    assert unproject_steering(13.66 * DEG, 0.0, P) / DEG == pytest.approx(15.00, abs=0.015)
    assert unproject_steering(df, 0.0, P) / DEG == pytest.approx(15.0, abs=1e-12)


def test_projection_relation_and_sign():
    for d in (-0.4, -0.1, 0.1, 0.4):
        for phi in (-0.3, 0.0, 0.3):
            df = project_steering(d, phi, P)
            assert math.tan(df) * math.cos(phi) == pytest.approx(math.tan(d) * math.cos(P.lam), rel=1e-12)
            assert math.copysign(1, df) == math.copysign(1, d)


@pytest.mark.parametrize("d", [-15, -10, -5, 5, 10, 15])
@pytest.mark.parametrize("phi", [-10, 0, 10])
def test_projection_round_trip(d, phi):
    df = project_steering(d * DEG, phi * DEG, P)
    assert unproject_steering(df, phi * DEG, P) == pytest.approx(d * DEG, abs=1e-12)


def test_projection_domain_error():
    with pytest.raises(ValueError):
        project_steering(0.1, 2.0, P)


def test_projection_rate_value_and_consistency():
    assert steering_projection_rate(0.2, 0.0, 0.1, 0.0, P) == 0.0
    rate = steering_projection_rate(15 * DEG, 1.0, 0.0, 0.0, P)
    expected = math.cos(P.lam) / math.cos(15 * DEG) ** 2 * math.cos(project_steering(15 * DEG, 0, P)) ** 2
    assert rate == pytest.approx(expected, rel=1e-12)
    assert rate == pytest.approx(0.9170, abs=5e-4)
    d, dd, phi, pd, eps = 0.3, 0.7, -0.2, 1.3, 1e-7
    fd = (project_steering(d + eps * dd, phi + eps * pd, P) - project_steering(d, phi, P)) / eps
    assert steering_projection_rate(d, dd, phi, pd, P) == pytest.approx(fd, abs=1e-6)


# rolling constraint ------------------------------------------------------------

def test_rear_velocity_examples():
    assert rear_contact_velocity(0.0, 0.0, 0.0, P) == (0.0, 0.0)
    vx, vy = rear_contact_velocity(0.0, -10.0, 0.0, P)
    assert (vx, vy) == pytest.approx((1.0, 0.0), abs=1e-15)
    vx, vy = rear_contact_velocity(1.5, -10.0, 13.66 * DEG, P)
    assert vx == pytest.approx(0.9717, abs=1e-4)
    assert vy == pytest.approx(-0.3669, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-3, 3), st.floats(-60, 60), st.floats(-1.2, 1.2),
)
def test_pure_rolling_residuals(psi_dot, omega_f, delta_f):
    vx, vy = rear_contact_velocity(psi_dot, omega_f, delta_f, P)
    assert vx + omega_f * P.r * math.cos(delta_f) == pytest.approx(0.0, abs=1e-12)
    assert vy + psi_dot * P.b + omega_f * P.r * math.sin(delta_f) == pytest.approx(0.0, abs=1e-12)


def test_pose_rates_rotate_rear_velocity():
    x = np.array([0.0, 0.0, 0.0, 0.0, -10.0])  # straight rolling at 1 m/s
    assert pose_derivative((0, 0, 0), x, (0, 0), P) == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)
    assert pose_derivative((0, 0, math.pi / 2), x, (0, 0), P) == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)
    # yaw rate adds lateral rear velocity -psi_dot * b, rotated into the world frame
    x[3] = 0.7
    vy = -0.7 * P.b
    assert pose_derivative((0, 0, 0.3), x, (0, 0), P) == pytest.approx(
        [math.cos(0.3) - vy * math.sin(0.3), math.sin(0.3) + vy * math.cos(0.3), 0.7], abs=1e-12
    )


# contact forces --------------------------------------------------------------------

def test_static_rest_normal_forces():
    cf = contact_forces(np.zeros(5), (0, 0), (0, 0, 0), P)
    assert cf.slip_regularized
    assert cf.N_f == pytest.approx(P.m * P.g * P.a / P.b, rel=1e-12)
    assert cf.N_f == pytest.approx(21.75, abs=5e-3)
    assert cf.N_r == pytest.approx(31.57, abs=5e-3)


def test_burnout_friction_is_longitudinal():
    cf = contact_forces(np.zeros(5), (0, 10.0), (0, 0, 0), P)
    assert cf.f_ry == 0.0
    assert cf.f_rx == pytest.approx(-P.mu * cf.N_r, rel=1e-12)
    assert cf.f_rx == pytest.approx(-9.47, abs=5e-3)


def _slip_vector(x, u):
    df = project_steering(x[0], x[1], P)
    vx, vy = rear_contact_velocity(x[3], x[4], df, P)
    return np.array([vx + u[1] * P.r, vy])


def test_force_invariants_on_random_states(rng):
    xs, us = random_states(rng, 100)
    accs = rng.normal(0, 3, (100, 3))
    for x, u, acc in zip(xs, us, accs):
        cf = contact_forces(x, u, acc, P)
        slip = _slip_vector(x, u)
        if np.linalg.norm(slip) > EPS_SLIP:
            assert math.hypot(cf.f_rx, cf.f_ry) == pytest.approx(P.mu * abs(cf.N_r), rel=1e-10)
        assert cf.f_rx * slip[0] + cf.f_ry * slip[1] <= 1e-12
        assert cf.f_fx + cf.f_rx - P.m * cf.a_g[0] == pytest.approx(0.0, abs=1e-12)
        assert cf.f_fy + cf.f_ry - P.m * cf.a_g[1] == pytest.approx(0.0, abs=1e-12)
        assert cf.N_f + cf.N_r + P.m * cf.a_g[2] - P.m * P.g == pytest.approx(0.0, abs=1e-10)


def test_forces_affine_in_acceleration(rng):
    xs, us = random_states(rng, 50)
    for x, u in zip(xs, us):
        a1, a2 = rng.normal(0, 3, 3), rng.normal(0, 3, 3)
        t = rng.uniform(-1, 2)
        mix = t * a1 + (1 - t) * a2
        f1 = np.array(contact_forces(x, u, a1, P).as_tuple())
        f2 = np.array(contact_forces(x, u, a2, P).as_tuple())
        fm = np.array(contact_forces(x, u, mix, P).as_tuple())
        scale = 1 + np.abs(f1) + np.abs(f2)
        assert np.all(np.abs(fm - (t * f1 + (1 - t) * f2)) <= 1e-12 * scale)


def test_slip_regularization_below_threshold():
    # straight rolling with matching wheel speeds: no slip
    x = np.array([0.0, 0.0, 0.0, 0.0, -10.0])
    cf = contact_forces(x, (0.0, -10.0), (0, 0, 0), P)
    assert cf.slip_regularized and cf.f_rx == 0.0 and cf.f_ry == 0.0


# equations of motion ---------------------------------------------------------------

def test_mass_matrix_matches_implicit_solve_oracle(rng):
    xs, us = random_states(rng, 20)
    for x, u in zip(xs, us):
        try:
            acc = state_derivative(x, u, P)[2:]
        except ModelError:
            continue
        sol = root(lambda a: eom_residual(x, u, a, P), np.zeros(3), method="hybr", tol=1e-13)
        assert np.linalg.norm(eom_residual(x, u, sol.x, P)) < 1e-9
        assert np.allclose(acc, sol.x, rtol=0, atol=1e-8 * (1 + np.abs(sol.x).max()))


def test_residual_identity_at_solved_acceleration(rng):
    xs, us = random_states(rng, 30)
    for x, u in zip(xs, us):
        try:
            eom = assemble_eom(x, u, P)
        except ModelError:
            continue
        res = eom_residual(x, u, eom.accelerations(), P)
        assert np.linalg.norm(res) < 1e-10 * (1 + np.linalg.norm(eom.F))


def test_mass_matrix_depends_on_rear_wheel_speed():
    x = np.array([-0.2, 0.3, 0.0, 1.2, -23.0])
    m1 = assemble_eom(x, (0, -27.0), P).M
    m2 = assemble_eom(x, (0, -40.0), P).M
    assert np.max(np.abs(m1 - m2)) > 1e-6


def test_gyroscopic_roll_term_scales_with_rear_wheel_speed():
    # without friction the roll forcing is affine in omega_r with slope I_r * psi_dot
    p0 = P.replace(mu=0.0)
    x = np.array([0.1, 0.0, 0.2, 1.2, -20.0])
    f = [assemble_eom(x, (0.1, wr), p0).F[0] for wr in (0.0, -10.0, -20.0)]
    single, double = f[1] - f[0], f[2] - f[0]
    assert abs(single) == pytest.approx(P.I_r * 10.0 * 1.2, rel=1e-9)
    assert double == pytest.approx(2 * single, rel=1e-9)


def test_equilibrium_derivative_vanishes(eq_cs15):
    assert np.linalg.norm(state_derivative(eq_cs15.state, eq_cs15.input, P)) < 1e-6


def test_mirror_symmetry_random_states(rng):
    xs, us = random_states(rng, 100)
    checked = 0
    for x, u in zip(xs, us):
        try:
            d = state_derivative(x, u, P)
        except ModelError:
            continue
        dm = state_derivative(mirror_state(x), mirror_input(u), P)
        assert np.allclose(dm, mirror_state(d), rtol=1e-9, atol=1e-9)
        checked += 1
    assert checked >= 50


def test_envelope_violation_raises():
    with pytest.raises(ModelError) as info:
        assemble_eom([0.1, 1.6, 0, 1, -20], (0, -20), P)
    assert info.value.cause == "envelope"


def test_liftoff_detected():
    # a fast roll swing pulls the body off the ground
    with pytest.raises(ModelError) as info:
        state_derivative([0.0, 0.0, 10.0, 0.0, 0.0], (0, 0), P)
    assert info.value.cause == "liftoff"
