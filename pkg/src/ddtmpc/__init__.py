"""Data-driven tracking MPC for unknown discrete-time LTI systems.

The controller never sees a model: one persistently exciting input-output
trajectory parametrizes every prediction through its Hankel matrices, and
a tracking MPC with an artificial equilibrium steers the plant to the
optimal reachable setpoint. The QP solver, the equilibrium computations,
and the closed-loop harness are all part of the package.
"""

from ddtmpc.closed_loop import (
    ClosedLoopLog, Experiment, TargetSchedule, fit_decay, run, run_sweep,
    verify_theorem2)
from ddtmpc.equilibria import (
    EquilibriumSolution, TargetSetpoint, is_equilibrium_pair,
    model_reachable_equilibrium, optimal_reachable_equilibrium)
from ddtmpc.hankel import (
    DataTrajectory, HankelBlock, MembershipResult, PeReport,
    PersistenceError, generate_pe_input, hankel, is_persistently_exciting,
    max_pe_order, trajectory_membership)
from ddtmpc.mpc import Controller, ControllerError, History, MpcConfig
from ddtmpc.plant import (
    SystemRealization, Trajectory, dc_gain, four_tank, random_minimal,
    simulate, steady_state_from_input)
from ddtmpc.qp import (
    QpProblem, QpSettings, QpSolution, QpWorkspace, solve_qp)
from ddtmpc.sets import BoxSet

__version__ = "0.1.0"

__all__ = [
    "BoxSet",
    "ClosedLoopLog",
    "Controller",
    "ControllerError",
    "DataTrajectory",
    "EquilibriumSolution",
    "Experiment",
    "HankelBlock",
    "History",
    "MembershipResult",
    "MpcConfig",
    "PeReport",
    "PersistenceError",
    "QpProblem",
    "QpSettings",
    "QpSolution",
    "QpWorkspace",
    "SystemRealization",
    "TargetSchedule",
    "TargetSetpoint",
    "Trajectory",
    "dc_gain",
    "fit_decay",
    "four_tank",
    "generate_pe_input",
    "hankel",
    "is_equilibrium_pair",
    "is_persistently_exciting",
    "max_pe_order",
    "model_reachable_equilibrium",
    "optimal_reachable_equilibrium",
    "random_minimal",
    "run",
    "run_sweep",
    "simulate",
    "solve_qp",
    "steady_state_from_input",
    "trajectory_membership",
    "verify_theorem2",
]
