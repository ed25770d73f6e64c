"""Steady-state drifting equilibria.

An equilibrium is the 5-vector ``xi = (delta, phi, psi_dot, omega_f, omega_r)``
at which the three accelerations of the model vanish with ``delta_dot = 0``
and ``phi_dot = 0``. Two solvers are provided:

* ``solve_numeric``: damped Newton on the full model, any two entries of xi fixed.
* ``solve_adesa``: the geometric fixed-point construction from steering angle and
  yaw rate, which neglects weight transfer and linearizes the roll balance.

Counter-steering (CS) means ``sign(delta) != sign(psi_dot)``.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from sttw_drift import _kernels as K
from sttw_drift.dynamics import ModelError, param_vector
from sttw_drift.params import RobotParams

XI_NAMES = ("delta", "phi", "psi_dot", "omega_f", "omega_r")

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
FD_STEP = 1e-6
MAX_BACKTRACKS = 20
MAX_COLLAPSES = 3
ADESA_EPS = 1e-6
ADESA_MAX_ITER = 100

CSV_COLUMNS = (
    "method",
    "delta",
    "psi_dot",
    "phi",
    "omega_f",
    "omega_r",
    "delta_r",
    "delta_f",
    "R_r",
    "residual",
    "iterations",
    "wall_time_ns",
    "feasible",
    "mode",
)


class EquilibriumError(RuntimeError):
    pass


class InfeasibleEquilibrium(EquilibriumError):
    """No drifting equilibrium exists for the request."""


class ConvergenceError(EquilibriumError):
    def __init__(self, message: str, best: "EquilibriumPoint | None" = None):
        super().__init__(message)
        self.best = best


class SingularJacobian(EquilibriumError):
    pass


@dataclass
class EquilibriumPoint:
    xi: np.ndarray
    residual_norm: float
    iterations: int
    method: str
    delta_f: float = math.nan
    delta_r: float = math.nan  # signed sideslip: angle of the rear contact velocity from the wheel heading
    R_r: float = math.nan
    v_r: float = math.nan  # rear contact speed
    feasible: bool = True
    drifting: bool = True
    wall_time_ns: int = 0
    request: tuple[float, float] | None = None  # (delta, psi_dot) of a sweep grid point
    message: str = ""

    def __getattr__(self, name):
        # xi components by name: point.phi, point.omega_r, ...
        if name in XI_NAMES:
            return float(self.xi[XI_NAMES.index(name)])
        raise AttributeError(name)

    @property
    def state(self) -> np.ndarray:
        d, phi, w, wf, _ = self.xi
        return np.array([d, phi, 0.0, w, wf])

    @property
    def input(self) -> np.ndarray:
        return np.array([0.0, self.xi[4]])

    @property
    def mode(self) -> str:
        return steering_mode(self.xi[0], self.xi[2])


@dataclass(frozen=True)
class EquilibriumSpec:
    fixed: Mapping[str, float]
    guess: Sequence[float] | None = None

    def __post_init__(self):
        if len(self.fixed) != 2:
            raise ValueError("exactly two variables of xi must be fixed")
        for name in self.fixed:
            if name not in XI_NAMES:
                raise ValueError(f"unknown equilibrium variable {name!r}; expected one of {XI_NAMES}")


def steering_mode(delta: float, psi_dot: float) -> str:
    if delta == 0 or psi_dot == 0 or not (math.isfinite(delta) and math.isfinite(psi_dot)):
        return "none"
    return "CS" if math.copysign(1, delta) != math.copysign(1, psi_dot) else "PS"


def mirror_xi(xi: Sequence[float]) -> np.ndarray:
    out = np.array(xi, dtype=float)
    out[:3] *= -1.0
    return out


def _accelerations(xi: np.ndarray, pvec: np.ndarray) -> np.ndarray:
    x = np.array([xi[0], xi[1], 0.0, xi[2], xi[3]])
    u = np.array([0.0, xi[4]])
    xdot = np.empty(5)
    status = K.derivative(x, u, pvec, xdot)
    if status not in (K.OK, K.LIFTOFF):
        raise ModelError(K.STATUS_NAMES[status])
    if status == K.LIFTOFF:
        raise ModelError("liftoff")
    return xdot[2:]


def residual(xi: Sequence[float], params: RobotParams) -> np.ndarray:
    """Accelerations ``(phi_ddot, psi_ddot, omega_f_dot)`` at the steady candidate xi.

    These are ``M^-1 F``; with M invertible they vanish exactly where F does.
    """
    return _accelerations(np.asarray(xi, dtype=float), param_vector(params))


def _geometry(xi: np.ndarray, params: RobotParams) -> dict:
    delta, phi, psi_dot, omega_f, omega_r = xi
    delta_f = K.project_steering(delta, phi, params.lam)
    v_rx, v_ry = K.rear_velocity(psi_dot, omega_f, delta_f, params.b, params.r)
    speed = math.hypot(v_rx, v_ry)
    slip = math.hypot(v_rx + omega_r * params.r, v_ry)
    return dict(
        delta_f=delta_f,
        delta_r=math.atan2(v_ry, v_rx) if speed > 0 else 0.0,
        R_r=speed / abs(psi_dot) if psi_dot != 0 else math.inf,
        v_r=speed,
        drifting=bool(psi_dot != 0 and slip > K.EPS_SLIP),
    )


def _initial_guess(spec: EquilibriumSpec, params: RobotParams) -> np.ndarray:
    fixed = spec.fixed
    if "delta" in fixed and "psi_dot" in fixed:
        try:
            return solve_adesa(fixed["delta"], fixed["psi_dot"], params=params).xi.copy()
        except EquilibriumError:
            pass
    # generic counter-steering drift, mirrored to the requested turn direction
    base = solve_adesa(math.radians(-10.0), 1.2, params=params).xi.copy()
    sign = 1.0
    for name in ("psi_dot", "delta", "phi"):
        if name in fixed and fixed[name] != 0:
            sign = math.copysign(1.0, fixed[name]) * (-1.0 if name == "delta" else 1.0)
            break
    return base if sign > 0 else mirror_xi(base)


def solve_numeric(spec: EquilibriumSpec, params: RobotParams) -> EquilibriumPoint:
    """Damped Newton on the three free entries of xi with a central-difference Jacobian."""
    start = time.perf_counter_ns()
    pvec = param_vector(params)
    xi = np.array(spec.guess, dtype=float) if spec.guess is not None else _initial_guess(spec, params)
    if xi.shape != (5,):
        raise ValueError("guess must be a 5-vector")
    fixed_idx = [XI_NAMES.index(n) for n in spec.fixed]
    for name, value in spec.fixed.items():
        xi[XI_NAMES.index(name)] = value
    free = [i for i in range(5) if i not in fixed_idx]

    def norm_at(z):
        trial = xi.copy()
        trial[free] = z
        try:
            r = _accelerations(trial, pvec)
        except ModelError:
            return None, math.inf
        n = float(np.linalg.norm(r))
        return r, (n if math.isfinite(n) else math.inf)

    z = xi[free].copy()
    r, rnorm = norm_at(z)
    if r is None:
        raise InfeasibleEquilibrium("model invalid at the initial guess")
    best_z, best_norm = z.copy(), rnorm
    collapses = 0
    it = 0
    while rnorm > NEWTON_TOL:
        if it >= NEWTON_MAX_ITER:
            xi[free] = best_z
            raise ConvergenceError(
                f"no convergence after {NEWTON_MAX_ITER} iterations (residual {best_norm:.3g})",
                best=_make_point(xi, best_norm, it, "numeric", params, start),
            )
        it += 1
        jac = np.empty((3, 3))
        for j in range(3):
            zp, zm = z.copy(), z.copy()
            zp[j] += FD_STEP
            zm[j] -= FD_STEP
            rp, _ = norm_at(zp)
            rm, _ = norm_at(zm)
            if rp is None or rm is None:
                raise InfeasibleEquilibrium("model invalid while differentiating")
            jac[:, j] = (rp - rm) / (2.0 * FD_STEP)
        if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > 1e14:
            raise SingularJacobian("singular residual Jacobian")
        step = np.linalg.solve(jac, -r)
        t = 1.0
        trial = None  # (norm, t, r) of the best rejected trial
        accepted = False
        for _ in range(MAX_BACKTRACKS + 1):
            r_new, n_new = norm_at(z + t * step)
            if r_new is not None and n_new <= (1.0 - 1e-4 * t) * rnorm:
                accepted = True
                break
            if r_new is not None and (trial is None or n_new < trial[0]):
                trial = (n_new, t, r_new)
            t *= 0.5
        if not accepted:
            collapses += 1
            if collapses >= MAX_COLLAPSES or trial is None:
                raise InfeasibleEquilibrium(
                    f"line search collapsed {collapses} times (residual {best_norm:.3g}); no equilibrium found"
                )
            n_new, t, r_new = trial
        else:
            collapses = 0
        z = z + t * step
        r, rnorm = r_new, n_new
        if rnorm < best_norm:
            best_z, best_norm = z.copy(), rnorm
    xi[free] = z
    return _make_point(xi, rnorm, it, "numeric", params, start)


def _make_point(xi, rnorm, iterations, method, params, start_ns, **extra) -> EquilibriumPoint:
    geo = _geometry(xi, params)
    geo.update(extra)
    return EquilibriumPoint(
        xi=xi.copy(),
        residual_norm=float(rnorm),
        iterations=int(iterations),
        method=method,
        wall_time_ns=time.perf_counter_ns() - start_ns,
        **geo,
    )


_ADESA_FAILURES = {1: "geometric infeasibility", 2: "no convergence", 3: "singular sideslip"}


def solve_adesa(
    delta_ss: float,
    psi_dot_ss: float,
    eps: float = ADESA_EPS,
    params: RobotParams | None = None,
    max_iter: int = ADESA_MAX_ITER,
) -> EquilibriumPoint:
    """Geometric fixed-point equilibrium from steering angle and yaw rate.

    The rear turning radius is ``mu g / psi_dot^2``; the rear sideslip follows
    from the triangle of rear contact, front contact and turn centre; wheel
    speeds from the rolling constraint and a purely centripetal rear friction;
    roll from the small-angle roll balance. The projected steering angle is
    corrected until the recovered steering angle matches ``delta_ss``.
    """
    if params is None:
        raise TypeError("params is required")
    start = time.perf_counter_ns()
    if psi_dot_ss == 0 or not math.isfinite(psi_dot_ss):
        raise InfeasibleEquilibrium("geometric infeasibility: zero yaw rate has no finite turning radius")
    if not abs(delta_ss) < 0.5 * math.pi:
        raise InfeasibleEquilibrium("steering angle outside (-pi/2, pi/2)")
    sign = 1.0 if psi_dot_ss > 0 else -1.0
    (status, iterations, delta, phi, omega_f, omega_r, delta_f, rear_angle, radius, speed) = K.adesa_kernel(
        sign * delta_ss, abs(psi_dot_ss), eps, max_iter, params._kernel_vec
    )
    if status == 1:
        raise InfeasibleEquilibrium(
            f"geometric infeasibility: wheelbase does not fit the rear turning circle at psi_dot={psi_dot_ss:.4g}"
        )
    if status == 3:
        raise InfeasibleEquilibrium("singular sideslip: rear contact velocity normal to the wheel")
    point = EquilibriumPoint(
        xi=np.array((sign * delta, sign * phi, psi_dot_ss, omega_f, omega_r)),
        residual_norm=abs(delta - sign * delta_ss),
        iterations=iterations,
        method="adesa",
        delta_f=sign * delta_f,
        delta_r=sign * (rear_angle - 0.5 * math.pi),
        R_r=radius,
        v_r=speed,
        wall_time_ns=time.perf_counter_ns() - start,
    )
    if status == 2:
        raise ConvergenceError(f"ADESA did not converge in {max_iter} iterations", best=point)
    return point


def _infeasible(method, delta, psi_dot, message, wall_ns=0, iterations=0) -> EquilibriumPoint:
    xi = np.array([delta, math.nan, psi_dot, math.nan, math.nan])
    return EquilibriumPoint(
        xi=xi,
        residual_norm=math.nan,
        iterations=iterations,
        method=method,
        feasible=False,
        drifting=False,
        wall_time_ns=wall_ns,
        request=(delta, psi_dot),
        message=message,
    )


def warm_up(params: RobotParams) -> None:
    """Load the compiled kernels so that one-off JIT cost stays out of per-point timings."""
    K.adesa_kernel(-0.2, 1.0, ADESA_EPS, ADESA_MAX_ITER, params._kernel_vec)
    _accelerations(np.array([-0.2, 0.3, 1.0, -20.0, -40.0]), params._kernel_vec)


def sweep(
    delta_list: Iterable[float],
    psi_dot_range: tuple[float, float],
    n: int,
    method: str,
    params: RobotParams,
) -> dict[str, list[EquilibriumPoint]]:
    """Equilibria over a (steering angle x yaw rate) grid.

    Yaw rates are visited in ascending magnitude. Numeric solves start from
    the ADESA point when it exists, otherwise from the previous numeric
    solution of the same steering series. Per-point failures are recorded as
    infeasible rows.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if method not in ("numeric", "adesa", "both"):
        raise ValueError(f"unknown method {method!r}")
    rates = sorted(np.linspace(psi_dot_range[0], psi_dot_range[1], n), key=abs)
    want_numeric = method in ("numeric", "both")
    want_adesa = method in ("adesa", "both")
    warm_up(params)
    table: dict[str, list[EquilibriumPoint]] = {}
    if want_numeric:
        table["numeric"] = []
    if want_adesa:
        table["adesa"] = []

    for delta in delta_list:
        previous = None
        for w in rates:
            w = float(w)
            request = (float(delta), w)
            t0 = time.perf_counter_ns()
            try:
                adesa = solve_adesa(delta, w, params=params)
                adesa = replace(adesa, request=request)
            except EquilibriumError as exc:
                adesa = _infeasible("adesa", delta, w, str(exc), time.perf_counter_ns() - t0)
            if want_adesa:
                table["adesa"].append(adesa)
            if not want_numeric:
                continue
            guess = adesa.xi if adesa.feasible else previous
            try:
                if guess is None:
                    raise InfeasibleEquilibrium("no initial guess available")
                spec = EquilibriumSpec({"delta": delta, "psi_dot": w}, guess=guess)
                point = replace(solve_numeric(spec, params), request=request)
                previous = point.xi
            except EquilibriumError as exc:
                point = _infeasible("numeric", delta, w, str(exc))
            table["numeric"].append(point)
    return table


@dataclass
class CompareRow:
    delta: float
    n_points: int
    RAE: float  # roll angle, percent
    RVE: float  # rear wheel speed, percent
    FVE: float  # front wheel speed, percent
    numeric_time_ns: float
    adesa_time_ns: float

    @property
    def speedup(self) -> float:
        return self.numeric_time_ns / self.adesa_time_ns if self.adesa_time_ns > 0 else math.inf


class GridMismatch(ValueError):
    pass


def _grid_key(point: EquilibriumPoint) -> tuple[float, float]:
    if point.request is not None:
        return point.request
    return (float(point.xi[0]), float(point.xi[2]))


def percent_error(estimate: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return 100.0 * np.abs(estimate - reference) / np.abs(reference)


def compare(
    sweep_numeric: Sequence[EquilibriumPoint], sweep_adesa: Sequence[EquilibriumPoint]
) -> list[CompareRow]:
    """Percentage discrepancy of ADESA against numeric equilibria, per steering angle.

    Errors are averaged over the points feasible in both sweeps; timings over
    every feasible point of each sweep.
    """
    if len(sweep_numeric) != len(sweep_adesa):
        raise GridMismatch("sweeps have different lengths")
    for pn, pa in zip(sweep_numeric, sweep_adesa):
        if _grid_key(pn) != _grid_key(pa):
            raise GridMismatch(f"grid points differ: {_grid_key(pn)} vs {_grid_key(pa)}")
    deltas: list[float] = []
    for p in sweep_numeric:
        d = _grid_key(p)[0]
        if d not in deltas:
            deltas.append(d)
    rows = []
    for d in deltas:
        pairs = [(pn, pa) for pn, pa in zip(sweep_numeric, sweep_adesa) if _grid_key(pn)[0] == d]
        both = [(pn, pa) for pn, pa in pairs if pn.feasible and pa.feasible]
        if both:
            num = np.array([pn.xi for pn, _ in both])
            ade = np.array([pa.xi for _, pa in both])
            rae = float(np.mean(percent_error(ade[:, 1], num[:, 1])))
            rve = float(np.mean(percent_error(ade[:, 4], num[:, 4])))
            fve = float(np.mean(percent_error(ade[:, 3], num[:, 3])))
        else:
            rae = rve = fve = math.nan
        t_num = [pn.wall_time_ns for pn, _ in pairs if pn.feasible]
        t_ade = [pa.wall_time_ns for _, pa in pairs if pa.feasible]
        rows.append(
            CompareRow(
                delta=d,
                n_points=len(both),
                RAE=rae,
                RVE=rve,
                FVE=fve,
                numeric_time_ns=float(np.mean(t_num)) if t_num else math.nan,
                adesa_time_ns=float(np.mean(t_ade)) if t_ade else math.nan,
            )
        )
    return rows


def point_row(point: EquilibriumPoint) -> dict:
    delta, phi, w, wf, wr = point.xi
    if point.request is not None:
        delta, w = point.request
    return {
        "method": point.method,
        "delta": delta,
        "psi_dot": w,
        "phi": phi,
        "omega_f": wf,
        "omega_r": wr,
        "delta_r": point.delta_r,
        "delta_f": point.delta_f,
        "R_r": point.R_r,
        "residual": point.residual_norm,
        "iterations": point.iterations,
        "wall_time_ns": point.wall_time_ns,
        "feasible": int(point.feasible),
        "mode": steering_mode(delta, w),
    }


def write_points_csv(points: Iterable[EquilibriumPoint], fh, header_comment: str = "") -> None:
    if header_comment:
        for line in header_comment.splitlines():
            fh.write(f"# {line}\n")
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for p in points:
        writer.writerow({k: format_value(v) for k, v in point_row(p).items()})


COMPARE_COLUMNS = ("delta", "n_points", "RAE", "RVE", "FVE", "numeric_time_ns", "adesa_time_ns", "speedup")


def write_compare_csv(rows: Iterable[CompareRow], fh, header_comment: str = "") -> None:
    if header_comment:
        for line in header_comment.splitlines():
            fh.write(f"# {line}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(COMPARE_COLUMNS)
    for r in rows:
        writer.writerow(
            [format_value(v) for v in (r.delta, r.n_points, r.RAE, r.RVE, r.FVE, r.numeric_time_ns, r.adesa_time_ns, r.speedup)]
        )


def format_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    return str(value)


def points_to_csv_text(points: Iterable[EquilibriumPoint]) -> str:
    buf = io.StringIO()
    write_points_csv(points, buf)
    return buf.getvalue()
