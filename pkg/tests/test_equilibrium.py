import csv
import io
import math

import numpy as np
import pytest

from sttw_drift.equilibrium import (
    CSV_COLUMNS,
    ConvergenceError,
    EquilibriumError,
    EquilibriumSpec,
    GridMismatch,
    InfeasibleEquilibrium,
    compare,
    mirror_xi,
    points_to_csv_text,
    residual,
    solve_adesa,
    solve_numeric,
    sweep,
)
from sttw_drift.params import RobotParams

P = RobotParams()
DEG = math.pi / 180

# frozen from scipy.optimize.root on the residual (independent of the damped Newton solver)
XI_CS15_W12 = np.array([-0.26179939, 0.32334136, 1.2, -23.2358684, -27.49070188])
XI_CS15_W15 = np.array([-15 * DEG, 0.31348604, 1.5, -17.82830165, -23.58373892])


def test_numeric_equilibrium_matches_frozen_values(eq_cs15):
    assert eq_cs15.residual_norm <= 1e-8
    assert np.allclose(eq_cs15.xi, XI_CS15_W12, rtol=0, atol=5e-8)
    assert eq_cs15.R_r == pytest.approx(2.07297, abs=1e-5)
    assert eq_cs15.drifting and eq_cs15.mode == "CS"


def test_numeric_matches_adesa_within_ten_percent():
    spec = EquilibriumSpec({"delta": -15 * DEG, "psi_dot": 1.5})
    num = solve_numeric(spec, P)
    ade = solve_adesa(-15 * DEG, 1.5, params=P)
    assert num.residual_norm <= 1e-8
    assert np.allclose(num.xi, XI_CS15_W15, atol=5e-8)
    for i in (1, 3, 4):
        assert abs(ade.xi[i] - num.xi[i]) / abs(num.xi[i]) <= 0.10


def test_residual_isolates_equilibrium(eq_cs15):
    assert np.linalg.norm(residual(eq_cs15.xi, P)) <= 1e-8
    bumped = eq_cs15.xi.copy()
    bumped[1] += 5 * DEG
    assert np.linalg.norm(residual(bumped, P)) > 0


def test_residual_mirror_symmetry(eq_cs15):
    xi = eq_cs15.xi + np.array([0.01, -0.02, 0.1, 0.5, -1.0])
    r = residual(xi, P)
    rm = residual(mirror_xi(xi), P)
    assert np.allclose(rm, [-r[0], -r[1], r[2]], atol=1e-12)


def test_mirrored_spec_gives_mirrored_equilibrium(eq_cs15):
    m = solve_numeric(EquilibriumSpec({"delta": 15 * DEG, "psi_dot": -1.2}), P)
    assert np.allclose(m.xi, mirror_xi(eq_cs15.xi), atol=1e-8)
    assert m.mode == "CS"


def test_degenerate_straight_riding_point_not_drifting():
    for guess in ([0, 0, 0, 0, 0], [0, 0, 0, -10, -10]):
        pt = solve_numeric(EquilibriumSpec({"delta": 0.0, "psi_dot": 0.0}, guess=guess), P)
        assert not pt.drifting
        assert pt.delta_r == 0.0
        assert pt.residual_norm <= 1e-8


def test_other_fixed_pairs(eq_cs15):
    spec = EquilibriumSpec({"phi": eq_cs15.phi, "omega_r": eq_cs15.omega_r}, guess=eq_cs15.xi + 0.01)
    pt = solve_numeric(spec, P)
    assert np.allclose(pt.xi, eq_cs15.xi, atol=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        EquilibriumSpec({"delta": 0.1})
    with pytest.raises(ValueError):
        EquilibriumSpec({"delta": 0.1, "speed": 1.0})


def test_adesa_radius_independent_of_steering():
    for d in (-5, -10, -15):
        pt = solve_adesa(d * DEG, 1.5, params=P)
        assert pt.R_r == pytest.approx(P.mu * P.g / 1.5**2, rel=1e-12)
        assert pt.R_r == pytest.approx(1.3080, abs=5e-5)


def test_adesa_frozen_point():
    # regression values of the geometric iteration at 15 deg counter-steer, 1.5 rad/s
    pt = solve_adesa(-15 * DEG, 1.5, params=P)
    assert pt.phi == pytest.approx(0.3135237, abs=1e-6)
    assert pt.omega_f == pytest.approx(-17.2383, abs=1e-3)
    assert pt.omega_r == pytest.approx(-23.0469, abs=1e-3)


def test_adesa_convergence_contract():
    pt = solve_adesa(-15 * DEG, 1.2, eps=1e-6, params=P)
    assert abs(pt.delta - (-15 * DEG)) <= 1e-6
    assert pt.method == "adesa"


def test_adesa_mirror():
    a = solve_adesa(-10 * DEG, 1.3, params=P)
    b = solve_adesa(10 * DEG, -1.3, params=P)
    assert np.allclose(b.xi, mirror_xi(a.xi), atol=1e-12)


def test_adesa_rejects_zero_yaw_rate():
    with pytest.raises(InfeasibleEquilibrium, match="geometric infeasibility"):
        solve_adesa(-0.2, 0.0, params=P)


def test_adesa_geometric_infeasibility_at_high_yaw_rate():
    # rear turning circle smaller than the wheelbase allows
    with pytest.raises(InfeasibleEquilibrium, match="geometric infeasibility"):
        solve_adesa(-15 * DEG, 6.0, params=P)


def test_adesa_iteration_cap_reports_best():
    with pytest.raises(ConvergenceError) as info:
        solve_adesa(-15 * DEG, 1.2, eps=1e-300, params=P, max_iter=3)
    assert info.value.best is not None


def test_positive_steering_at_low_yaw_rate_infeasible_or_small_sideslip():
    cs = solve_numeric(EquilibriumSpec({"delta": -15 * DEG, "psi_dot": 0.8}), P)
    try:
        ps = solve_numeric(EquilibriumSpec({"delta": 15 * DEG, "psi_dot": 0.8}), P)
    except EquilibriumError:
        return
    assert abs(ps.delta_r) < abs(cs.delta_r)


def test_warm_start_from_adesa_converges_quickly():
    for d in (-5, -10, -15):
        for w in np.linspace(0.6, 2.0, 15):
            try:
                guess = solve_adesa(d * DEG, w, params=P).xi
            except EquilibriumError:
                continue
            pt = solve_numeric(EquilibriumSpec({"delta": d * DEG, "psi_dot": w}, guess=guess), P)
            assert pt.iterations <= 15


@pytest.fixture(scope="module")
def small_sweep():
    return sweep([-15 * DEG], (0.6, 2.0), 30, "both", P)


def test_sweep_trends(small_sweep):
    pts = [p for p in small_sweep["numeric"] if p.feasible]
    assert len(pts) >= 25
    rates = np.array([p.psi_dot for p in pts])
    assert np.all(np.diff(rates) > 0)
    slip = np.abs([p.delta_r for p in pts])
    roll = np.abs([p.phi for p in pts])
    assert np.sum(np.diff(slip) < 0) <= 1
    assert np.sum(np.diff(roll) > 0) <= 1


def test_sweep_methods_share_grid(small_sweep):
    num, ade = small_sweep["numeric"], small_sweep["adesa"]
    assert [p.request for p in num] == [p.request for p in ade]
    assert all(p.residual_norm <= 1e-8 for p in num if p.feasible)


def test_sweep_records_failures_instead_of_raising():
    table = sweep([-15 * DEG], (5.0, 6.0), 2, "both", P)
    assert all(not p.feasible for p in table["adesa"])
    assert all(not p.feasible and p.message for p in table["numeric"])


def test_sweep_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sweep([0.1], (0.6, 2.0), 1, "numeric", P)
    with pytest.raises(ValueError):
        sweep([0.1], (0.6, 2.0), 5, "magic", P)


def test_compare_against_itself_is_zero(small_sweep):
    rows = compare(small_sweep["numeric"], small_sweep["numeric"])
    assert len(rows) == 1
    assert rows[0].RAE == 0.0 and rows[0].RVE == 0.0 and rows[0].FVE == 0.0


def test_compare_grid_mismatch(small_sweep):
    with pytest.raises(GridMismatch):
        compare(small_sweep["numeric"], small_sweep["adesa"][:-1])
    with pytest.raises(GridMismatch):
        compare(small_sweep["numeric"], list(reversed(small_sweep["adesa"])))


def test_points_csv_layout(small_sweep):
    text = points_to_csv_text(small_sweep["numeric"][:3])
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    assert rows[0]["mode"] == "CS" and rows[0]["method"] == "numeric"
    assert float(rows[0]["delta"]) == -15 * DEG
    assert "np." not in text
