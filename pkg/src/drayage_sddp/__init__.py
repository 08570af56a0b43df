"""Multistage stochastic drayage allocation: stage LPs, a bundled simplex solver, SDDP training and evaluation."""

from .core import (
    Carrier,
    CostParams,
    Decision,
    DrayageError,
    InfeasibilityError,
    Instance,
    StageRealization,
    StructuralError,
    SystemState,
    ValidationError,
    holding_cost,
    state_transition,
    transport_cost,
)
from .evaluation import (
    bias_and_ci,
    deterministic_equivalent,
    evaluate_policy,
    exact_cost_to_go,
    regret,
    sensitivity_run,
    simulate_policy,
    wait_and_see_cost,
)
from .instancegen import PracticalSpec, gen_practical_instance, gen_small_instance, validate_recourse
from .lpsolve import LinearProgram, LpBuilder, LpSolution, SolverError, Status, solve_lp
from .scenario import (
    CopulaSpec,
    FlowModel,
    IntensityModel,
    RandomStream,
    ScenarioLattice,
    build_lattice,
    simulate_scenario,
    simulate_scenarios,
)
from .sddp import (
    AdaptiveRegret,
    BoundStall,
    IterationLimit,
    Policy,
    SimulationGap,
    TrainingStats,
    TrainOptions,
    backward_pass,
    check_stopping,
    forward_pass,
    train,
)
from .stagemodel import Cut, StageResult, build_stage_subproblem, solve_stage

__version__ = "0.1.0"

__all__ = [
    "Carrier", "CostParams", "Decision", "DrayageError", "InfeasibilityError", "Instance",
    "StageRealization", "StructuralError", "SystemState", "ValidationError", "holding_cost",
    "state_transition", "transport_cost",
    "bias_and_ci", "deterministic_equivalent", "evaluate_policy", "exact_cost_to_go", "regret",
    "sensitivity_run", "simulate_policy", "wait_and_see_cost",
    "PracticalSpec", "gen_practical_instance", "gen_small_instance", "validate_recourse",
    "LinearProgram", "LpBuilder", "LpSolution", "SolverError", "Status", "solve_lp",
    "CopulaSpec", "FlowModel", "IntensityModel", "RandomStream", "ScenarioLattice", "build_lattice",
    "simulate_scenario", "simulate_scenarios",
    "AdaptiveRegret", "BoundStall", "IterationLimit", "Policy", "SimulationGap", "TrainingStats",
    "TrainOptions", "backward_pass", "check_stopping", "forward_pass", "train",
    "Cut", "StageResult", "build_stage_subproblem", "solve_stage",
]
