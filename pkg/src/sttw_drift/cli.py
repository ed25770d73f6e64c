"""Command-line entry point: equilibrium solves, sweeps, solver comparison and closed-loop runs.

Exit codes: 0 success, 2 bad arguments or config, 3 infeasible equilibrium,
4 solver non-convergence, 5 simulation ended early, 6 simulation completed
but failed its scenario check.
"""

from __future__ import annotations

import argparse
import configparser
import math
import sys
from pathlib import Path

import numpy as np

from sttw_drift import __version__
from sttw_drift.equilibrium import (
    XI_NAMES,
    ConvergenceError,
    EquilibriumError,
    EquilibriumSpec,
    InfeasibleEquilibrium,
    compare,
    format_value,
    point_row,
    solve_adesa,
    solve_numeric,
    sweep,
    warm_up,
    write_compare_csv,
    write_points_csv,
    CSV_COLUMNS,
)
from sttw_drift.mpc import MpcConfig, mpc_config_from_section
from sttw_drift.params import ConfigError, RobotParams, dump_params, params_from_section, parse_angle, read_config
from sttw_drift.scenarios import RUNNERS, default_seed, scenario_from_section, scenario_lines
from sttw_drift.simulation import write_log_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_NONCONVERGENCE = 4
EXIT_SIM_TERMINATED = 5
EXIT_SIM_FAILED_CHECK = 6

ANGLE_NAMES = frozenset({"delta", "phi"})


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_fix(text: str) -> tuple[str, float]:
    """'delta=-15deg' -> ('delta', -0.2618). Angles without a suffix are degrees."""
    if "=" not in text:
        raise UsageError(f"--fix expects NAME=VALUE, got {text!r}")
    name, raw = (s.strip() for s in text.split("=", 1))
    if name not in XI_NAMES:
        raise UsageError(f"unknown variable {name!r}; choose from {', '.join(XI_NAMES)}")
    try:
        if name in ANGLE_NAMES:
            return name, parse_angle(raw)
        return name, float(raw)
    except (ValueError, ConfigError) as exc:
        raise UsageError(f"cannot parse value for {name}: {raw!r}") from exc


def parse_angle_list(text: str) -> list[float]:
    items = [s for s in text.replace(";", ",").split(",") if s.strip()]
    try:
        return [parse_angle(s) for s in items]
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def load_config(path: str | None) -> tuple[RobotParams, MpcConfig, configparser.ConfigParser]:
    if path is None:
        return RobotParams(), MpcConfig(), read_config("")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    parser = read_config(text)
    params = params_from_section(parser["robot"]) if parser.has_section("robot") else RobotParams()
    cfg = mpc_config_from_section(parser["mpc"]) if parser.has_section("mpc") else MpcConfig()
    return params, cfg, parser


def header(params: RobotParams, extra: list[str] | None = None) -> str:
    lines = [f"sttw-drift {__version__}", *dump_params(params).strip().splitlines()]
    return "\n".join(lines + (extra or []))


def mpc_lines(cfg: MpcConfig) -> list[str]:
    def vec(v):
        return ", ".join(repr(float(x)) for x in np.ravel(v))

    return [
        "[mpc]",
        f"horizon = {cfg.horizon}",
        f"dt = {cfg.dt!r}",
        f"Q = {vec(cfg.Q)}",
        f"R = {vec(cfg.R)}",
        f"Q_f = {vec(cfg.Q_f)}",
        f"x_min = {vec(cfg.x_min)}",
        f"x_max = {vec(cfg.x_max)}",
        f"u_min = {vec(cfg.u_min)}",
        f"u_max = {vec(cfg.u_max)}",
        f"max_sqp_iters = {cfg.max_sqp_iters}",
        f"penalty_weight = {cfg.penalty_weight!r}",
    ]


# commands --------------------------------------------------------------------

def cmd_eq_solve(args, out) -> int:
    params, _, _ = load_config(args.params)
    fixed = dict(parse_fix(f) for f in args.fix)
    if len(args.fix) != 2 or len(fixed) != 2:
        raise UsageError("give exactly two distinct --fix NAME=VALUE pairs")
    warm_up(params)
    if args.method == "adesa":
        if set(fixed) != {"delta", "psi_dot"}:
            raise UsageError("ADESA needs --fix delta=... and --fix psi_dot=...")
        point = solve_adesa(fixed["delta"], fixed["psi_dot"], params=params)
    else:
        point = solve_numeric(EquilibriumSpec(fixed), params)
    xi = point.xi
    out.write(f"method: {point.method}\n")
    out.write("xi: " + ", ".join(f"{n} = {v:.6g}" for n, v in zip(XI_NAMES, xi)) + "\n")
    out.write(f"delta (deg) = {math.degrees(xi[0]):.4f}, phi (deg) = {math.degrees(xi[1]):.4f}\n")
    out.write(f"R_r = {point.R_r:.4f} m\n")
    out.write(f"delta_r (deg) = {math.degrees(point.delta_r):.4f}\n")
    out.write(f"residual = {point.residual_norm:.3e}\n")
    out.write(f"iterations = {point.iterations}\n")
    out.write(f"wall_time_us = {point.wall_time_ns / 1e3:.1f}\n")
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            write_points_csv([point], fh, header(params))
    else:
        row = point_row(point)
        out.write(",".join(CSV_COLUMNS) + "\n")
        out.write(",".join(format_value(v) for v in row.values()) + "\n")
    return EXIT_OK


def _grid(args):
    deltas = parse_angle_list(args.delta)
    if not deltas:
        raise UsageError("empty steering-angle grid")
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    lo, hi = args.psi_dot_range
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo == hi:
        raise UsageError("--psi-dot-range needs two distinct finite values")
    return deltas, (lo, hi)


def _grid_lines(args, deltas, rates) -> list[str]:
    return [
        "[grid]",
        "delta = " + ", ".join(f"{d!r} rad" for d in deltas),
        f"psi_dot_range = {rates[0]!r}, {rates[1]!r}",
        f"n = {args.n}",
        f"method = {args.method}",
    ]


def _write_sweeps(prefix: str, table, hdr: str) -> list[str]:
    paths = []
    for method, points in table.items():
        path = f"{prefix}_{method}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            write_points_csv(points, fh, hdr)
        paths.append(path)
    return paths


def cmd_eq_sweep(args, out) -> int:
    params, _, _ = load_config(args.params)
    deltas, rates = _grid(args)
    table = sweep(deltas, rates, args.n, args.method, params)
    hdr = header(params, _grid_lines(args, deltas, rates))
    for path in _write_sweeps(args.out, table, hdr):
        out.write(f"wrote {path}\n")
    for method, points in table.items():
        feasible = sum(p.feasible for p in points)
        out.write(f"{method}: {feasible}/{len(points)} feasible points\n")
    return EXIT_OK


def cmd_eq_compare(args, out) -> int:
    params, _, _ = load_config(args.params)
    args.method = "both"
    deltas, rates = _grid(args)
    table = sweep(deltas, rates, args.n, "both", params)
    rows = compare(table["numeric"], table["adesa"])
    hdr = header(params, _grid_lines(args, deltas, rates))
    for path in _write_sweeps(args.out, table, hdr):
        out.write(f"wrote {path}\n")
    path = f"{args.out}_compare.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_compare_csv(rows, fh, hdr)
    out.write(f"wrote {path}\n")
    out.write("delta_deg  n  RAE%   RVE%   FVE%   numeric_us  adesa_us  speedup\n")
    for r in rows:
        out.write(
            f"{math.degrees(r.delta):8.2f} {r.n_points:3d} {r.RAE:6.2f} {r.RVE:6.2f} {r.FVE:6.2f} "
            f"{r.numeric_time_ns / 1e3:10.1f} {r.adesa_time_ns / 1e3:9.2f} {r.speedup:8.1f}\n"
        )
    t_num = np.mean([p.wall_time_ns for p in table["numeric"] if p.feasible])
    t_ade = np.mean([p.wall_time_ns for p in table["adesa"] if p.feasible])
    out.write(f"overall speedup (mean numeric / mean ADESA time): {t_num / t_ade:.1f}\n")
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    params, cfg, parser = load_config(args.params)
    section = parser[args.scenario] if parser.has_section(args.scenario) else None
    overrides = {"duration": args.duration}
    if args.scenario == "friction":
        seed = args.seed
        if seed is None and not (section is not None and "seed" in section):
            seed = default_seed()
        overrides["seed"] = seed
    scenario = scenario_from_section(args.scenario, section, **overrides)
    result = RUNNERS[args.scenario](scenario, params, cfg)
    hdr = header(params, mpc_lines(cfg) + scenario_lines(scenario))
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            write_log_csv(result.log, fh, hdr)
        out.write(f"wrote {args.output}\n")
    for line in result.summary_lines():
        out.write(line + "\n")
    if not result.log.completed:
        return EXIT_SIM_TERMINATED
    return EXIT_OK if result.passed else EXIT_SIM_FAILED_CHECK


# argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sttw-drift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sttw-drift {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--params", help="config file with [robot] (and optional [mpc], scenario) sections")

    p = sub.add_parser("eq-solve", help="solve one drifting equilibrium")
    common(p)
    p.add_argument("--fix", action="append", default=[], metavar="NAME=VALUE", help="fixed variable (twice)")
    p.add_argument("--method", choices=("adesa", "numeric"), default="numeric")
    p.add_argument("--output", help="write the point as CSV here instead of stdout")
    p.set_defaults(func=cmd_eq_solve)

    for name, func, helptext in (
        ("eq-sweep", cmd_eq_sweep, "equilibria over a steering x yaw-rate grid"),
        ("eq-compare", cmd_eq_compare, "ADESA vs numeric discrepancy and timing per steering angle"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--delta", default="-5deg,-10deg,-15deg", help="comma-separated steering angles")
        p.add_argument("--psi-dot-range", nargs=2, type=float, default=(0.6, 2.0), metavar=("LO", "HI"))
        p.add_argument("--n", type=int, default=20, help="yaw rates per steering angle")
        if name == "eq-sweep":
            p.add_argument("--method", choices=("numeric", "adesa", "both"), default="both")
        p.add_argument("--out", default=name.replace("-", "_"), help="output path prefix")
        p.set_defaults(func=func)

    p = sub.add_parser("simulate", help="closed-loop experiment")
    common(p)
    p.add_argument("scenario", choices=tuple(RUNNERS))
    p.add_argument("--output", help="trajectory log CSV path")
    p.add_argument("--seed", type=int, help="terrain seed (friction scenario)")
    p.add_argument("--duration", type=float, help="override the scenario duration [s]")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_USAGE
    except InfeasibleEquilibrium as exc:
        sys.stderr.write(f"infeasible: {exc}\n")
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        sys.stderr.write(f"not converged: {exc}\n")
        return EXIT_NONCONVERGENCE
    except EquilibriumError as exc:
        # singular Jacobian and other solver breakdowns
        sys.stderr.write(f"not converged: {exc}\n")
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
