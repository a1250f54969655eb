"""Secondary frequency control in power networks with on-off and relay load participation."""

from .analysis import (
    EquilibriumPoint,
    LyapunovValue,
    lyapunov_value,
    overshoot_metrics,
    security_check,
    solve_equilibrium,
    verify_dissipation,
)
from .loads import (
    FilippovInterval,
    HystereticLoad,
    SwitchingLoad,
    filippov_demand,
    hysteresis_flow_set,
    hysteresis_jump,
    hysteresis_jump_set,
    hysteretic_demand,
    switching_demand,
)
from .network import Bus, ContinuousState, Line, Network, build_network, line_flows, swing_rhs
from .run import run_scenario
from .scenario import (
    Scenario,
    build_loop,
    initial_state,
    load_scenario,
    parse_scenario,
    serialize_scenario,
    solver_config,
)
from .solver import (
    ClosedLoop,
    Disturbance,
    HybridState,
    SolverConfig,
    Trajectory,
    chattering_report,
    integrate_flow,
    locate_event,
    min_dwell_time,
    simulate,
    sliding_step,
)
from .supply import (
    LinearStateSpace,
    NonlinearSupply,
    PassivityCertificate,
    PILag,
    PISecondOrder,
    StaticDamping,
    StorageFunction,
    TransferFunction,
    check_passivity,
    derive_storage,
    gain_condition,
    gain_margin,
    governor_transfer_function,
    realize_transfer_function,
    supply_flow,
)

__version__ = "0.1.0"

__all__ = [
    "Bus",
    "ClosedLoop",
    "ContinuousState",
    "Disturbance",
    "EquilibriumPoint",
    "FilippovInterval",
    "HybridState",
    "HystereticLoad",
    "Line",
    "LinearStateSpace",
    "LyapunovValue",
    "Network",
    "NonlinearSupply",
    "PILag",
    "PISecondOrder",
    "PassivityCertificate",
    "Scenario",
    "SolverConfig",
    "StaticDamping",
    "StorageFunction",
    "SwitchingLoad",
    "Trajectory",
    "TransferFunction",
    "build_loop",
    "build_network",
    "chattering_report",
    "check_passivity",
    "derive_storage",
    "filippov_demand",
    "gain_condition",
    "gain_margin",
    "governor_transfer_function",
    "hysteresis_flow_set",
    "hysteresis_jump",
    "hysteresis_jump_set",
    "hysteretic_demand",
    "initial_state",
    "integrate_flow",
    "line_flows",
    "load_scenario",
    "locate_event",
    "lyapunov_value",
    "min_dwell_time",
    "overshoot_metrics",
    "parse_scenario",
    "realize_transfer_function",
    "run_scenario",
    "security_check",
    "serialize_scenario",
    "simulate",
    "sliding_step",
    "solve_equilibrium",
    "solver_config",
    "supply_flow",
    "swing_rhs",
    "switching_demand",
    "verify_dissipation",
]
