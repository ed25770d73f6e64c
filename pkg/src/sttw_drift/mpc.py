"""Receding-horizon drift controller.

Each solve runs an iterative LQ method over the horizon: roll out the RK4
discrete model, linearize it by central differences, solve the time-varying
LQ subproblem with a Riccati backward pass and accept the best step of a
line-searched forward pass. Box bounds enter as a quadratic penalty whose
weight doubles while the optimized trajectory still violates them; the
returned input is finally clamped to the input bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sttw_drift import _ilqr, _kernels as K
from sttw_drift.dynamics import ControlInput, ModelError
from sttw_drift.equilibrium import (
    EquilibriumError,
    EquilibriumPoint,
    EquilibriumSpec,
    solve_adesa,
    solve_numeric,
)
from sttw_drift.params import ConfigError, RobotParams, parse_angle

FD_STEP = 1e-6
LINE_SEARCH = tuple(0.5**i for i in range(11))
REL_TOL = 1e-9
MAX_PENALTY_DOUBLINGS = 8
BOUND_TOL = 1e-6


def _matrix(value, n: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.shape == (n,):
        arr = np.diag(arr)
    if arr.shape != (n, n):
        raise ValueError(f"{name} must be a length-{n} diagonal or an {n}x{n} matrix")
    arr.flags.writeable = False
    return arr


def _vector(value, n: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have {n} entries")
    arr.flags.writeable = False
    return arr


_DEFAULT_Q = (10.0, 50.0, 1.0, 10.0, 0.1)


@dataclass(frozen=True, eq=False)
class MpcConfig:
    horizon: int = 50
    dt: float = 0.02
    Q: np.ndarray = field(default_factory=lambda: np.diag(_DEFAULT_Q))
    R: np.ndarray = field(default_factory=lambda: np.diag((1.0, 0.5)))
    Q_f: np.ndarray = field(default_factory=lambda: 10.0 * np.diag(_DEFAULT_Q))
    x_min: np.ndarray = field(
        default_factory=lambda: np.array([-math.radians(35), -math.radians(40), -np.inf, -np.inf, -np.inf])
    )
    x_max: np.ndarray = field(
        default_factory=lambda: np.array([math.radians(35), math.radians(40), np.inf, np.inf, np.inf])
    )
    u_min: np.ndarray = field(default_factory=lambda: np.array([-6.0, -80.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([6.0, 80.0]))
    max_sqp_iters: int = 10
    penalty_weight: float = 1e3

    def __post_init__(self):
        object.__setattr__(self, "Q", _matrix(self.Q, 5, "Q"))
        object.__setattr__(self, "R", _matrix(self.R, 2, "R"))
        object.__setattr__(self, "Q_f", _matrix(self.Q_f, 5, "Q_f"))
        for name, n in (("x_min", 5), ("x_max", 5), ("u_min", 2), ("u_max", 2)):
            object.__setattr__(self, name, _vector(getattr(self, name), n, name))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.max_sqp_iters < 1:
            raise ValueError("max_sqp_iters must be at least 1")
        if not self.penalty_weight > 0:
            raise ValueError("penalty_weight must be positive")
        for name in ("Q", "Q_f"):
            m = getattr(self, name)
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")
        if np.any(self.x_min > self.x_max) or np.any(self.u_min > self.u_max):
            raise ValueError("bounds must be elementwise ordered")

    def replace(self, **changes) -> "MpcConfig":
        names = ("horizon", "dt", "Q", "R", "Q_f", "x_min", "x_max", "u_min", "u_max", "max_sqp_iters", "penalty_weight")
        values = {n: getattr(self, n) for n in names}
        values.update(changes)
        return MpcConfig(**values)


def _parse_list(text: str, angles: bool = False) -> list[float]:
    out = []
    for item in text.replace(";", ",").split(","):
        item = item.strip().lower()
        if item in ("inf", "+inf"):
            out.append(math.inf)
        elif item == "-inf":
            out.append(-math.inf)
        elif angles and (item.endswith("deg") or item.endswith("rad")):
            out.append(parse_angle(item))
        else:
            try:
                out.append(float(item))
            except ValueError as exc:
                raise ConfigError(f"cannot parse number {item!r}") from exc
    return out


def mpc_config_from_section(section) -> MpcConfig:
    """Build an MpcConfig from an ``[mpc]`` config section.

    Weights are comma-separated diagonals (or 25/4 entries for a full matrix).
    Bounds are comma-separated; entries may carry deg/rad suffixes, plain
    numbers are SI units.
    """
    values: dict = {}
    for key, raw in section.items():
        if key in ("horizon", "max_sqp_iters"):
            try:
                values[key] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"cannot parse {key} = {raw!r}") from exc
        elif key in ("dt", "penalty_weight"):
            values[key] = _parse_list(raw)[0]
        elif key in ("Q", "R", "Q_f"):
            n = 2 if key == "R" else 5
            entries = _parse_list(raw)
            values[key] = entries if len(entries) == n else np.reshape(entries, (n, n))
        elif key in ("x_min", "x_max", "u_min", "u_max"):
            values[key] = _parse_list(raw, angles=True)
        else:
            raise ConfigError(f"unknown mpc key {key!r}")
    try:
        return MpcConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def equilibrium_state(xi: Sequence[float]) -> np.ndarray:
    d, phi, w, wf, _ = xi
    return np.array([d, phi, 0.0, w, wf])


def discretize(state, inp, dt: float, params: RobotParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 one-step map and its central-difference Jacobians A = df/dx, B = df/du."""
    x = np.asarray(state, dtype=float)
    u = np.asarray(inp, dtype=float)
    pvec = params._kernel_vec
    nxt = np.empty(5)
    status = K.rk4_step(x, u, dt, pvec, nxt)
    if status != K.OK:
        raise ModelError(K.STATUS_NAMES[status])
    A = np.empty((5, 5))
    B = np.empty((5, 2))
    status = K.linearize_step(x, u, dt, pvec, FD_STEP, A, B)
    if status != K.OK:
        raise ModelError(K.STATUS_NAMES[status])
    return nxt, A, B


@dataclass
class SolveInfo:
    iterations: int = 0
    objective: float = math.nan
    degraded: bool = False
    converged: bool = False
    penalty_weight: float = math.nan
    history: list[tuple[float, float]] = field(default_factory=list)  # (penalty weight, objective) per accepted iterate
    message: str = ""


@dataclass
class ReferenceTrajectory:
    """Equilibrium samples at uniform spacing ``dt`` starting at ``t0``.

    ``u_ss[k]`` is (steering rate of the ramp, rear wheel speed). Queries
    past either end hold the end sample.
    """

    t0: float
    dt: float
    xi: np.ndarray
    u_ss: np.ndarray
    feasible: np.ndarray
    xi_target: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.xi))

    def __len__(self) -> int:
        return len(self.xi)

    def window(self, t: float, n: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Linearly interpolated (xi, u_ss) at t, t+dt, ..., t+(n-1)dt."""
        pos = (t + dt * np.arange(n) - self.t0) / self.dt
        pos = np.clip(pos, 0.0, len(self.xi) - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, len(self.xi) - 1)
        frac = (pos - lo)[:, None]
        xi = self.xi[lo] * (1 - frac) + self.xi[hi] * frac
        u = self.u_ss[lo] * (1 - frac) + self.u_ss[hi] * frac
        return xi, u

    @classmethod
    def constant(cls, point: EquilibriumPoint | Sequence[float], dt: float = 0.02) -> "ReferenceTrajectory":
        xi = np.asarray(getattr(point, "xi", point), dtype=float)
        return cls(
            t0=0.0,
            dt=dt,
            xi=xi[None, :].copy(),
            u_ss=np.array([[0.0, xi[4]]]),
            feasible=np.array([True]),
            xi_target=xi.copy(),
        )


@dataclass(frozen=True)
class RampSchedule:
    """Linear ramp windows [s] for the steering angle and the yaw rate."""

    delta_start: float = 2.0
    delta_end: float = 7.0
    psi_dot_start: float = 2.0
    psi_dot_end: float = 20.0

    def __post_init__(self):
        if self.delta_end < self.delta_start or self.psi_dot_end < self.psi_dot_start:
            raise ValueError("ramp windows must end after they start")

    @property
    def end(self) -> float:
        return max(self.delta_end, self.psi_dot_end)


def _ramp(t: np.ndarray, start: float, end: float, v0: float, v1: float) -> tuple[np.ndarray, np.ndarray]:
    if end <= start:
        values = np.where(t < start, v0, v1)
        return values, np.zeros_like(t)
    s = np.clip((t - start) / (end - start), 0.0, 1.0)
    slope = np.where((t >= start) & (t < end), (v1 - v0) / (end - start), 0.0)
    return v0 + (v1 - v0) * s, slope


def plan_transition(
    xi_from: EquilibriumPoint | Sequence[float],
    delta_target: float,
    psi_dot_target: float,
    schedule: RampSchedule = RampSchedule(),
    cfg: MpcConfig | None = None,
    params: RobotParams | None = None,
    refine_target: bool = True,
) -> ReferenceTrajectory:
    """Equilibrium reference along linear ramps of steering angle and yaw rate.

    Every sample is an ADESA equilibrium of the interpolated (delta, psi_dot).
    Samples where ADESA fails hold the last feasible equilibrium and are
    flagged. With ``refine_target`` the target is re-solved numerically and
    appended one step after the ramps end, so the reference settles on an
    exact equilibrium of the model; otherwise the target is the ADESA point.
    """
    cfg = cfg or MpcConfig()
    params = params or RobotParams()
    xi0 = np.asarray(getattr(xi_from, "xi", xi_from), dtype=float)
    delta0, w0 = float(xi0[0]), float(xi0[2])
    try:
        target = solve_adesa(delta_target, psi_dot_target, params=params)
    except EquilibriumError as exc:
        raise EquilibriumError(f"target equilibrium infeasible: {exc}") from exc
    try:
        solve_adesa(delta0, w0, params=params)
    except EquilibriumError as exc:
        raise EquilibriumError(f"source equilibrium infeasible: {exc}") from exc

    n = int(math.floor(schedule.end / cfg.dt + 1e-9)) + 1
    t = cfg.dt * np.arange(n)
    delta, delta_rate = _ramp(t, schedule.delta_start, schedule.delta_end, delta0, delta_target)
    w, _ = _ramp(t, schedule.psi_dot_start, schedule.psi_dot_end, w0, psi_dot_target)

    xi = np.empty((n, 5))
    u_ss = np.empty((n, 2))
    feasible = np.ones(n, dtype=bool)
    last = None
    for k in range(n):
        try:
            last = solve_adesa(float(delta[k]), float(w[k]), params=params).xi
        except EquilibriumError:
            feasible[k] = False
            if last is None:
                last = solve_adesa(delta0, w0, params=params).xi
        xi[k] = last
        u_ss[k] = (delta_rate[k] if feasible[k] else 0.0, last[4])

    xi_target = target.xi
    if refine_target:
        spec = EquilibriumSpec({"delta": delta_target, "psi_dot": psi_dot_target}, guess=target.xi)
        try:
            xi_target = solve_numeric(spec, params).xi
        except EquilibriumError:
            pass
        else:
            xi = np.vstack([xi, xi_target])
            u_ss = np.vstack([u_ss, [0.0, xi_target[4]]])
            feasible = np.append(feasible, True)
    return ReferenceTrajectory(t0=0.0, dt=cfg.dt, xi=xi, u_ss=u_ss, feasible=feasible, xi_target=xi_target.copy())


class DriftMpc:
    """Stateful receding-horizon solver; keeps the last optimized inputs as warm start."""

    def __init__(self, cfg: MpcConfig | None = None, params: RobotParams | None = None, terminal: str = "horizon"):
        if terminal not in ("horizon", "final"):
            raise ValueError("terminal must be 'horizon' or 'final'")
        self.terminal = terminal
        self.cfg = cfg or MpcConfig()
        self.params = params or RobotParams()
        self.info = SolveInfo()
        self.reset()

    def reset(self) -> None:
        self._us: np.ndarray | None = None
        self._t: float | None = None

    # warm start -----------------------------------------------------------
    def _shifted(self, t: float | None) -> np.ndarray | None:
        if self._us is None:
            return None
        n, dt = self.cfg.horizon, self.cfg.dt
        if t is None or self._t is None:
            elapsed = dt
        else:
            elapsed = t - self._t
        idx = np.minimum(np.floor((dt * np.arange(n) + elapsed) / dt + 1e-9).astype(int), n - 1)
        idx = np.maximum(idx, 0)
        return self._us[idx].copy()

    # public solves ---------------------------------------------------------
    def solve_steady(self, x_now, target: EquilibriumPoint | Sequence[float], t: float | None = None) -> ControlInput:
        """First input of the horizon plan regulating toward a fixed equilibrium."""
        xi = np.asarray(getattr(target, "xi", target), dtype=float)
        n = self.cfg.horizon
        xr = np.tile(equilibrium_state(xi), (n + 1, 1))
        ur = np.tile([0.0, xi[4]], (n, 1))
        return self._solve(x_now, xr, ur, self.cfg.Q, t)

    def solve_tracking(
        self, x_now, ref: ReferenceTrajectory, t: float = 0.0, warm_start: bool = True
    ) -> ControlInput:
        """First input of the horizon plan following ``ref``.

        The terminal state is weighted by Q_f against the reference sample at
        the horizon end, or against ``ref.xi_target`` when the controller was
        built with ``terminal="final"``.

        The first solve starts from the reference inputs. ``warm_start=False``
        replaces that with a cold start that knows nothing of the reference:
        the current state held under its own LQ feedback with the rear wheel
        rolling at the front wheel speed. Later solves always shift the
        previous plan.
        """
        n = self.cfg.horizon
        xi, u_ss = ref.window(t, n + 1, self.cfg.dt)
        xr = np.column_stack([xi[:, 0], xi[:, 1], np.zeros(n + 1), xi[:, 2], xi[:, 3]])
        if self.terminal == "final":
            xr[n] = equilibrium_state(ref.xi_target)
        warm = None
        if self._us is None:
            warm = u_ss[:n].copy() if warm_start else self._cold_start(x_now)
        return self._solve(x_now, xr, u_ss[:n].copy(), self.cfg.Q_f, t, warm=warm)

    def _cold_start(self, x_now) -> np.ndarray | None:
        cfg = self.cfg
        x0 = np.asarray(x_now, dtype=float)
        n = cfg.horizon
        xh = np.tile(x0, (n + 1, 1))
        uh = np.tile([0.0, x0[4]], (n, 1))
        xs = np.empty((n + 1, 5))
        return self._feedback_start(
            x0, xh, uh, cfg.Q, cfg.R, np.ascontiguousarray(cfg.Q_f), cfg.x_min, cfg.x_max, cfg.u_min, cfg.u_max, xs
        )

    def _feedback_start(self, x0, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, xs_out):
        """Roll out the reference under its own LQ feedback when open-loop candidates fail.

        The reference is linearized in place (its states need not form a
        trajectory of the model) and the resulting time-varying gains steer
        the rollout from ``x0`` back toward it.
        """
        cfg = self.cfg
        pvec = self.params._kernel_vec
        n = cfg.horizon
        A = np.empty((n, 5, 5))
        B = np.empty((n, 5, 2))
        xr_c = np.ascontiguousarray(xr)
        ur_c = np.ascontiguousarray(ur)
        if K.linearize_trajectory(xr_c, ur_c, cfg.dt, pvec, FD_STEP, A, B) != K.OK:
            return None
        Kfb = np.zeros((n, 2, 5))
        kff = np.zeros((n, 2))
        failed, _, _ = _ilqr.backward_pass(
            A, B, xr_c, ur_c, xr_c, ur_c, Q, R, QT, xlo, xhi, ulo, uhi, self.cfg.penalty_weight, 1e-8, Kfb, kff
        )
        if failed >= 0:
            return None
        us = np.empty((n, 2))
        if _ilqr.forward_pass(x0, xr_c, ur_c, Kfb, kff, 0.0, cfg.dt, pvec, xs_out, us) != -1:
            return None
        return us

    # core ------------------------------------------------------------------
    def _solve(self, x_now, xr, ur, QT, t, warm=None) -> ControlInput:
        cfg = self.cfg
        x0 = np.asarray(x_now, dtype=float)
        if x0.shape != (5,) or not np.all(np.isfinite(x0)):
            raise ValueError("x_now must be a finite 5-vector")
        if abs(x0[0]) >= 0.5 * math.pi or abs(x0[1]) >= 0.5 * math.pi:
            raise ModelError("envelope", "current state outside the model envelope")
        pvec = self.params._kernel_vec
        n = cfg.horizon
        Q, R = np.ascontiguousarray(cfg.Q), np.ascontiguousarray(cfg.R)
        QT = np.ascontiguousarray(QT)
        xlo, xhi, ulo, uhi = (np.ascontiguousarray(v) for v in (cfg.x_min, cfg.x_max, cfg.u_min, cfg.u_max))

        candidates = [c for c in (warm, self._shifted(t), ur) if c is not None]
        xs = np.empty((n + 1, 5))
        us = None
        for cand in candidates:
            if K.rollout(x0, np.ascontiguousarray(cand), cfg.dt, pvec, xs) == -1:
                us = np.ascontiguousarray(cand, dtype=float)
                break
        if us is None:
            us = self._feedback_start(x0, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, xs)
        info = SolveInfo()
        if us is None:
            # no candidate survives the horizon: fall back to the reference input
            self.info = SolveInfo(degraded=True, message="no valid warm start rollout")
            self._us, self._t = None, t
            return ControlInput(*np.clip(ur[0], cfg.u_min, cfg.u_max))

        w = cfg.penalty_weight
        cost = _ilqr.trajectory_cost(xs, us, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, w)
        info.history.append((w, cost))
        A = np.empty((n, 5, 5))
        B = np.empty((n, 5, 2))
        Kfb = np.zeros((n, 2, 5))
        kff = np.zeros((n, 2))
        xs_new = np.empty_like(xs)
        us_new = np.empty_like(us)
        iterations = 0
        converged = False
        for _ in range(MAX_PENALTY_DOUBLINGS + 1):
            converged = False
            while iterations < cfg.max_sqp_iters:
                if K.linearize_trajectory(xs, us, cfg.dt, pvec, FD_STEP, A, B) != K.OK:
                    info.message = "linearization failed"
                    break
                reg = 1e-8
                while True:
                    failed, dv1, dv2 = _ilqr.backward_pass(
                        A, B, xs, us, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, w, reg, Kfb, kff
                    )
                    if failed < 0 or reg > 1e6:
                        break
                    reg *= 10.0
                if failed >= 0:
                    info.message = "backward pass not positive definite"
                    break
                iterations += 1
                if -(dv1 + dv2) <= REL_TOL * (1.0 + cost):
                    converged = True
                    break
                accepted = False
                for alpha in LINE_SEARCH:
                    if _ilqr.forward_pass(x0, xs, us, Kfb, kff, alpha, cfg.dt, pvec, xs_new, us_new) != -1:
                        continue
                    new_cost = _ilqr.trajectory_cost(xs_new, us_new, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, w)
                    if new_cost < cost:
                        accepted = True
                        break
                if not accepted:
                    # no descent along the LQ step: treat as stationary
                    converged = -(dv1 + dv2) <= 1e-6 * (1.0 + cost)
                    break
                xs, xs_new = xs_new, xs
                us, us_new = us_new, us
                improvement = cost - new_cost
                cost = new_cost
                info.history.append((w, cost))
                if improvement <= REL_TOL * (1.0 + cost):
                    converged = True
                    break
            violation = max(
                float(np.max(np.maximum(xs - xhi, 0.0) + np.maximum(xlo - xs, 0.0))),
                float(np.max(np.maximum(us - uhi, 0.0) + np.maximum(ulo - us, 0.0))),
            )
            if violation <= BOUND_TOL or iterations >= cfg.max_sqp_iters:
                break
            w *= 2.0
            cost = _ilqr.trajectory_cost(xs, us, xr, ur, Q, R, QT, xlo, xhi, ulo, uhi, w)
            info.history.append((w, cost))

        info.iterations = iterations
        info.objective = cost
        info.converged = converged
        info.degraded = not converged
        info.penalty_weight = w
        self.info = info
        self._us = us.copy()
        self._t = t
        return ControlInput(*np.clip(us[0], cfg.u_min, cfg.u_max))


def solve_steady(x_now, target, cfg: MpcConfig | None = None, params: RobotParams | None = None) -> ControlInput:
    """One-shot steady solve with a fresh controller (no warm-start memory)."""
    return DriftMpc(cfg, params).solve_steady(x_now, target)


def solve_tracking(x_now, ref: ReferenceTrajectory, cfg=None, params=None, t: float = 0.0) -> ControlInput:
    return DriftMpc(cfg, params).solve_tracking(x_now, ref, t)


class SteadyDriftController:
    """Closed-loop wrapper regulating to one equilibrium."""

    def __init__(self, target: EquilibriumPoint, cfg: MpcConfig | None = None, params: RobotParams | None = None):
        self.target = target
        self.mpc = DriftMpc(cfg, params)
        self._xi = np.asarray(getattr(target, "xi", target), dtype=float)

    def __call__(self, t, state, pose):
        return self.mpc.solve_steady(state, self.target, t)

    def diagnostics(self) -> dict:
        info = self.mpc.info
        return {
            "iterations": info.iterations,
            "objective": info.objective,
            "degraded": info.degraded,
            "reference": self._xi,
        }


class TransitionController:
    """Closed-loop wrapper tracking a planned equilibrium trajectory."""

    def __init__(
        self,
        ref: ReferenceTrajectory,
        cfg: MpcConfig | None = None,
        params: RobotParams | None = None,
        terminal: str = "horizon",
    ):
        self.ref = ref
        self.mpc = DriftMpc(cfg, params, terminal)
        self._t = 0.0

    def __call__(self, t, state, pose):
        self._t = t
        return self.mpc.solve_tracking(state, self.ref, t)

    def diagnostics(self) -> dict:
        info = self.mpc.info
        xi, _ = self.ref.window(self._t, 1, self.ref.dt)
        return {
            "iterations": info.iterations,
            "objective": info.objective,
            "degraded": info.degraded,
            "reference": xi[0],
        }
