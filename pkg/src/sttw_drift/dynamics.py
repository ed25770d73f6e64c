"""Drifting dynamics of a single-track two-wheeled robot.

The front wheel rolls without slip; the rear wheel slides with Coulomb
friction whose direction follows the rear contact-patch slip velocity.
Conventions: body frame x forward along the wheelbase line, z down, angles
right-handed. Forward travel has ``omega_f < 0`` and ``v_rx > 0``.

State ``(delta, phi, phi_dot, psi_dot, omega_f)``, input ``(delta_dot, omega_r)``.
The three accelerations ``(phi_ddot, psi_ddot, omega_f_dot)`` obey
``M @ acc = F`` where M and F are extracted from the acceleration-affine
balance equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from sttw_drift import _kernels as K
from sttw_drift.params import RobotParams

EPS_SLIP = K.EPS_SLIP
COND_LIMIT = K.COND_LIMIT


class ModelError(RuntimeError):
    """The model is not valid at the requested state (liftoff, envelope exit, ...)."""

    def __init__(self, cause: str, message: str = ""):
        super().__init__(message or cause)
        self.cause = cause


class State(NamedTuple):
    delta: float
    phi: float
    phi_dot: float
    psi_dot: float
    omega_f: float


class ControlInput(NamedTuple):
    delta_dot: float
    omega_r: float


class Pose(NamedTuple):
    X: float
    Y: float
    psi: float


@dataclass(frozen=True)
class ContactForces:
    N_f: float
    N_r: float
    f_fx: float
    f_fy: float
    f_rx: float
    f_ry: float
    a_g: tuple[float, float, float]
    slip_speed: float
    slip_regularized: bool

    def as_tuple(self) -> tuple[float, ...]:
        return (self.N_f, self.N_r, self.f_fx, self.f_fy, self.f_rx, self.f_ry)


@dataclass(frozen=True)
class EomSystem:
    M: np.ndarray
    F: np.ndarray
    cond: float

    def accelerations(self) -> np.ndarray:
        return np.linalg.solve(self.M, self.F)


def param_vector(params: RobotParams) -> np.ndarray:
    """Read-only kernel layout of ``params`` (computed once per instance)."""
    return params._kernel_vec


def _vec(values: Sequence[float], n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have {n} components, got shape {arr.shape}")
    return arr


def project_steering(delta: float, phi: float, params: RobotParams) -> float:
    """Ground projection of the steering angle for a rolled, castered fork."""
    if math.cos(phi) <= 0.0:
        raise ValueError("roll angle outside (-pi/2, pi/2)")
    return K.project_steering(delta, phi, params.lam)


def unproject_steering(delta_f: float, phi: float, params: RobotParams) -> float:
    return K.unproject_steering(delta_f, phi, params.lam)


def steering_projection_rate(
    delta: float, delta_dot: float, phi: float, phi_dot: float, params: RobotParams
) -> float:
    if math.cos(phi) <= 0.0:
        raise ValueError("roll angle outside (-pi/2, pi/2)")
    return K.steering_rate(delta, delta_dot, phi, phi_dot, params.lam)


def rear_contact_velocity(
    psi_dot: float, omega_f: float, delta_f: float, params: RobotParams
) -> tuple[float, float]:
    """Rear contact velocity implied by a non-slipping front wheel."""
    return K.rear_velocity(psi_dot, omega_f, delta_f, params.b, params.r)


def contact_forces(
    state: Sequence[float],
    inp: Sequence[float],
    accel: Sequence[float],
    params: RobotParams,
) -> ContactForces:
    """Normal and friction forces at a candidate acceleration triple.

    All outputs are affine in ``accel``. ``slip_regularized`` is set when the
    rear slip speed is below ``EPS_SLIP``; the friction magnitude is then
    scaled down by ``slip / EPS_SLIP``.
    """
    acc = _vec(accel, 3, "accel")
    out = K.contact_forces(_vec(state, 5, "state"), _vec(inp, 2, "input"), acc[0], acc[1], acc[2], param_vector(params))
    return ContactForces(
        N_f=out[0],
        N_r=out[1],
        f_fx=out[2],
        f_fy=out[3],
        f_rx=out[4],
        f_ry=out[5],
        a_g=(out[6], out[7], out[8]),
        slip_speed=out[9],
        slip_regularized=out[9] < EPS_SLIP,
    )


def eom_residual(
    state: Sequence[float], inp: Sequence[float], accel: Sequence[float], params: RobotParams
) -> np.ndarray:
    """Roll, yaw and front-wheel equation residuals (lhs - rhs) at ``accel``."""
    acc = _vec(accel, 3, "accel")
    out = K.eom_residual(_vec(state, 5, "state"), _vec(inp, 2, "input"), acc[0], acc[1], acc[2], param_vector(params))
    return np.array(out[:3])


def _check_envelope(x: np.ndarray) -> None:
    if abs(x[0]) >= 0.5 * math.pi or abs(x[1]) >= 0.5 * math.pi:
        raise ModelError("envelope", f"state outside validity envelope: delta={x[0]:.4g}, phi={x[1]:.4g}")


def assemble_eom(state: Sequence[float], inp: Sequence[float], params: RobotParams) -> EomSystem:
    """Mass matrix and forcing of the three dynamic equations.

    M is read off column by column: residual(e_j) - residual(0); F = -residual(0).
    """
    x = _vec(state, 5, "state")
    _check_envelope(x)
    mass = np.empty((3, 3))
    forcing = np.empty(3)
    K.mass_system(x, _vec(inp, 2, "input"), param_vector(params), mass, forcing, np.empty(2), np.empty((2, 3)))
    cond = float(np.linalg.cond(mass))
    if not cond < COND_LIMIT:
        raise ModelError("ill_conditioned", f"mass matrix condition number {cond:.3g}")
    return EomSystem(M=mass, F=forcing, cond=cond)


def state_derivative(state: Sequence[float], inp: Sequence[float], params: RobotParams) -> np.ndarray:
    """``(delta_dot, phi_dot, phi_ddot, psi_ddot, omega_f_dot)``; raises ModelError on liftoff."""
    xdot = np.empty(5)
    status = K.derivative(_vec(state, 5, "state"), _vec(inp, 2, "input"), param_vector(params), xdot)
    if status != K.OK:
        raise ModelError(K.STATUS_NAMES[status])
    return xdot


def pose_derivative(
    pose: Sequence[float], state: Sequence[float], inp: Sequence[float], params: RobotParams
) -> np.ndarray:
    """World-frame rate of the rear contact position and yaw."""
    x = _vec(state, 5, "state")
    delta_f = K.project_steering(x[0], x[1], params.lam)
    v_rx, v_ry = K.rear_velocity(x[3], x[4], delta_f, params.b, params.r)
    out = np.empty(3)
    K.pose_rates(float(pose[2]), v_rx, v_ry, x[3], out)
    return out


def mirror_state(state: Sequence[float]) -> np.ndarray:
    """Left/right mirror image: negate delta, phi, phi_dot, psi_dot."""
    x = np.array(state, dtype=float)
    x[:4] *= -1.0
    return x


def mirror_input(inp: Sequence[float]) -> np.ndarray:
    u = np.array(inp, dtype=float)
    u[0] *= -1.0
    return u
