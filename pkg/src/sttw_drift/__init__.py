"""Drifting equilibria, closed-loop simulation and receding-horizon control of a
single-track two-wheeled robot whose rear wheel slides with Coulomb friction."""

from sttw_drift.dynamics import (
    ContactForces,
    ControlInput,
    EomSystem,
    ModelError,
    Pose,
    State,
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
)
from sttw_drift.equilibrium import (
    ConvergenceError,
    EquilibriumError,
    EquilibriumPoint,
    EquilibriumSpec,
    InfeasibleEquilibrium,
    SingularJacobian,
    compare,
    residual,
    solve_adesa,
    solve_numeric,
    sweep,
)
from sttw_drift.mpc import (
    DriftMpc,
    MpcConfig,
    RampSchedule,
    ReferenceTrajectory,
    SteadyDriftController,
    TransitionController,
    discretize,
    plan_transition,
    solve_steady,
    solve_tracking,
)
from sttw_drift.params import ConfigError, RobotParams, dump_params, load_params, load_params_file
from sttw_drift.simulation import TerrainGrid, TrajectoryLog, run_closed_loop, step

__version__ = "0.1.0"
