"""Fixed-step closed-loop simulation with zero-order-hold control and patchy terrain friction."""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence, TextIO

import numpy as np

from sttw_drift import _kernels as K
from sttw_drift.dynamics import ModelError, Pose
from sttw_drift.params import RobotParams

STATE_COLUMNS = ("delta", "phi", "phi_dot", "psi_dot", "omega_f")
POSE_COLUMNS = ("X", "Y", "psi")
INPUT_COLUMNS = ("delta_dot", "omega_r")
FORCE_COLUMNS = ("N_f", "N_r", "f_fx", "f_fy", "f_rx", "f_ry")
DIAG_COLUMNS = ("mpc_iterations", "mpc_objective", "mpc_degraded")
REF_COLUMNS = ("ref_delta", "ref_phi", "ref_psi_dot", "ref_omega_f", "ref_omega_r")
LOG_COLUMNS = ("t",) + STATE_COLUMNS + POSE_COLUMNS + INPUT_COLUMNS + FORCE_COLUMNS + ("mu",) + DIAG_COLUMNS + REF_COLUMNS

COMPLETED = "completed"


@dataclass(frozen=True)
class TerrainGrid:
    """Square friction blocks with a deterministic per-block coefficient.

    The coefficient of block (i, j) is a uniform draw in [mu_min, mu_max]
    obtained from a keyed hash of (i, j, seed), so any point can be queried
    in any order without replaying a random stream.
    """

    mu_min: float = 0.2
    mu_max: float = 0.4
    block_size: float = 0.5
    seed: int = 0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.block_size > 0:
            raise ValueError("block_size must be positive")
        if not 0 <= self.mu_min <= self.mu_max:
            raise ValueError("need 0 <= mu_min <= mu_max")

    def block_index(self, X: float, Y: float) -> tuple[int, int]:
        return (
            math.floor((X - self.origin[0]) / self.block_size),
            math.floor((Y - self.origin[1]) / self.block_size),
        )

    def block_mu(self, i: int, j: int) -> float:
        digest = hashlib.blake2b(struct.pack("<qqq", i, j, self.seed), digest_size=8).digest()
        unit = int.from_bytes(digest, "little") / 2.0**64
        return self.mu_min + (self.mu_max - self.mu_min) * unit

    def friction_at(self, X: float, Y: float) -> float:
        return self.block_mu(*self.block_index(X, Y))


class Controller(Protocol):
    """Anything that maps (time, state, pose) to an input pair.

    Controllers may also expose ``diagnostics() -> dict`` with keys
    ``iterations``, ``objective``, ``degraded`` and optionally ``reference``
    (a 5-vector delta, phi, psi_dot, omega_f, omega_r) which are copied into
    the log.
    """

    def __call__(self, t: float, state: np.ndarray, pose: np.ndarray) -> Sequence[float]: ...


class ControllerFailure(RuntimeError):
    pass


@dataclass
class TrajectoryLog:
    t: np.ndarray
    states: np.ndarray
    poses: np.ndarray
    inputs: np.ndarray
    forces: np.ndarray
    mu: np.ndarray
    diagnostics: np.ndarray
    reference: np.ndarray
    termination: str = COMPLETED
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def completed(self) -> bool:
        return self.termination == COMPLETED

    def column(self, name: str) -> np.ndarray:
        return self.table()[:, LOG_COLUMNS.index(name)]

    def table(self) -> np.ndarray:
        return np.column_stack(
            [self.t, self.states, self.poses, self.inputs, self.forces, self.mu, self.diagnostics, self.reference]
        )


def _local_params(pvec: np.ndarray, mu: float) -> np.ndarray:
    local = pvec.copy()
    local[K.P_MU] = mu
    return local


def step(
    state: Sequence[float],
    pose: Sequence[float],
    inp: Sequence[float],
    dt: float,
    terrain: TerrainGrid | None,
    params: RobotParams,
) -> tuple[np.ndarray, Pose]:
    """Advance state and pose by one RK4 step.

    The friction coefficient under the rear contact at the start of the step
    is used for the whole step.
    """
    z = np.concatenate([np.asarray(state, dtype=float), np.asarray(pose, dtype=float)])
    mu = params.mu if terrain is None else terrain.friction_at(z[5], z[6])
    out = np.empty(8)
    status = K.rk4_step_full(z, np.asarray(inp, dtype=float), dt, _local_params(params._kernel_vec, mu), out)
    if status != K.OK:
        raise ModelError(K.STATUS_NAMES[status])
    return out[:5], Pose(*out[5:])


def _forces_row(z: np.ndarray, u: np.ndarray, pvec: np.ndarray) -> np.ndarray:
    xdot = np.empty(5)
    if K.derivative(z[:5], u, pvec, xdot) != K.OK:
        return np.full(6, np.nan)
    out = K.contact_forces(z[:5], u, xdot[2], xdot[3], xdot[4], pvec)
    return np.array(out[:6])


def run_closed_loop(
    controller: Controller,
    x0: Sequence[float],
    pose0: Sequence[float] = (0.0, 0.0, 0.0),
    duration: float = 10.0,
    dt: float = 1e-3,
    control_period: float = 1e-2,
    terrain: TerrainGrid | None = None,
    params: RobotParams | None = None,
) -> TrajectoryLog:
    """Simulate with the controller sampled every ``control_period`` and held in between.

    Each logged row holds the time, state and pose at a step boundary, the
    input applied from that instant, the contact forces under that input and
    the local friction coefficient. A model failure or controller exception
    ends the run early; ``termination`` then names the cause.
    """
    params = params or RobotParams()
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if not dt > 0:
        raise ValueError("dt must be positive")
    ratio = control_period / dt
    hold = int(round(ratio))
    if hold < 1 or abs(ratio - hold) > 1e-9 * max(1.0, ratio):
        raise ValueError("control_period must be a positive integer multiple of dt")
    n_steps = int(round(duration / dt))

    pvec = params._kernel_vec
    z = np.concatenate([np.asarray(x0, dtype=float), np.asarray(pose0, dtype=float)])
    if z.shape != (8,):
        raise ValueError("x0 needs 5 components and pose0 needs 3")

    rows_t, rows_z, rows_u, rows_f, rows_mu, rows_d, rows_r = [], [], [], [], [], [], []
    u = np.zeros(2)
    diag = np.full(3, np.nan)
    ref = np.full(5, np.nan)
    termination = COMPLETED
    nxt = np.empty(8)

    for k in range(n_steps + 1):
        t = k * dt
        mu = params.mu if terrain is None else terrain.friction_at(z[5], z[6])
        local = _local_params(pvec, mu)
        if k % hold == 0:
            try:
                u = np.asarray(controller(t, z[:5].copy(), z[5:].copy()), dtype=float).reshape(2)
            except ModelError as exc:
                termination = f"controller_failure: {exc.cause}"
            except Exception as exc:  # controller bugs or solver failures end the run
                termination = f"controller_failure: {type(exc).__name__}: {exc}"
            if termination == COMPLETED and not np.all(np.isfinite(u)):
                termination = "controller_failure: non-finite input"
            if termination != COMPLETED:
                if k == 0:
                    u = np.full(2, np.nan)
                else:
                    break
            diag, ref = _controller_extras(controller)
        rows_t.append(t)
        rows_z.append(z.copy())
        rows_u.append(u.copy())
        rows_f.append(_forces_row(z, u, local) if termination == COMPLETED else np.full(6, np.nan))
        rows_mu.append(mu)
        rows_d.append(diag)
        rows_r.append(ref)
        if termination != COMPLETED or k == n_steps:
            break
        status = K.rk4_step_full(z, u, dt, local, nxt)
        if status != K.OK:
            termination = K.STATUS_NAMES[status]
            break
        z = nxt.copy()

    zs = np.array(rows_z)
    return TrajectoryLog(
        t=np.array(rows_t),
        states=zs[:, :5],
        poses=zs[:, 5:],
        inputs=np.array(rows_u),
        forces=np.array(rows_f),
        mu=np.array(rows_mu),
        diagnostics=np.array(rows_d),
        reference=np.array(rows_r),
        termination=termination,
        meta={"dt": dt, "control_period": control_period, "duration": duration},
    )


def _controller_extras(controller) -> tuple[np.ndarray, np.ndarray]:
    diag = np.full(3, np.nan)
    ref = np.full(5, np.nan)
    getter = getattr(controller, "diagnostics", None)
    if getter is None:
        return diag, ref
    info = getter() or {}
    diag[0] = info.get("iterations", np.nan)
    diag[1] = info.get("objective", np.nan)
    if "degraded" in info:
        diag[2] = float(bool(info["degraded"]))
    if info.get("reference") is not None:
        ref[:] = info["reference"]
    return diag, ref


def write_log_csv(log: TrajectoryLog, fh: TextIO, header_comment: str = "") -> None:
    """CSV with one row per step; floats use repr so identical runs give identical bytes."""
    for line in header_comment.splitlines():
        fh.write(f"# {line}\n")
    fh.write(f"# termination: {log.termination}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in log.table():
        writer.writerow(["nan" if math.isnan(v) else repr(float(v)) for v in row])


class ConstantInput:
    """Open-loop controller that always returns the same input."""

    def __init__(self, inp: Sequence[float]):
        self.inp = np.asarray(inp, dtype=float)

    def __call__(self, t, state, pose):
        return self.inp
