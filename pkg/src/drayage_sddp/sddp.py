"""SDDP training: forward sampling, backward single-cut generation, stopping rules."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np
from scipy.stats import norm

from .core import Instance, InfeasibilityError, SystemState, ValidationError, holding_cost
from .scenario import RandomStream, ScenarioLattice
from .stagemodel import Cut, StageResult, solve_stage

log = logging.getLogger(__name__)


@dataclass
class Policy:
    """Cuts per stage (``cuts[t - 1]`` bounds the cost-to-go after stage ``t``)."""

    cuts: list
    first_stage_bound: float = -math.inf
    initial_cost: float = 0.0
    metadata: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, instance: Instance) -> "Policy":
        return cls([[] for _ in range(instance.horizon)], initial_cost=holding_cost(instance.initial_state, instance.cost))

    @property
    def horizon(self) -> int:
        return len(self.cuts)

    def stage_cuts(self, t: int) -> list:
        return self.cuts[t - 1]

    def n_cuts(self) -> int:
        return sum(len(c) for c in self.cuts)

    def copy(self) -> "Policy":
        return Policy([list(c) for c in self.cuts], self.first_stage_bound, self.initial_cost, dict(self.metadata))

    def cost_to_go(self, t: int, state) -> float:
        """Cut model of the expected cost after stage ``t`` at its outgoing ``state``."""
        cuts = self.cuts[t - 1]
        return max([0.0] + [c.value(state) for c in cuts])


@dataclass
class Trajectory:
    states: list  # s_1 .. s_{tau+1}
    decisions: list
    realizations: list
    stage_costs: list
    indices: list | None = None
    initial_cost: float = 0.0

    @property
    def total_cost(self) -> float:
        return self.initial_cost + float(sum(self.stage_costs))


# --- stopping rules ---------------------------------------------------------

@dataclass(frozen=True)
class IterationLimit:
    limit: int

    def __post_init__(self):
        if self.limit < 1:
            raise ValidationError("IterationLimit must be positive")


@dataclass(frozen=True)
class BoundStall:
    window: int = 10
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.window < 1 or self.tolerance <= 0:
            raise ValidationError("BoundStall parameters must be positive")


@dataclass(frozen=True)
class SimulationGap:
    confidence: float = 0.95
    gap: float = 0.01

    def __post_init__(self):
        if not 0 < self.confidence < 1 or self.gap <= 0:
            raise ValidationError("SimulationGap needs confidence in (0,1) and a positive gap")


@dataclass(frozen=True)
class AdaptiveRegret:
    period: int = 25
    scenarios: int = 100
    delta: float = 0.002

    def __post_init__(self):
        if self.period < 1 or self.scenarios < 1 or self.delta <= 0:
            raise ValidationError("AdaptiveRegret parameters must be positive")


StoppingRule = Union[IterationLimit, BoundStall, SimulationGap, AdaptiveRegret]


class StopDecision(NamedTuple):
    stop: bool
    reason: str = ""


# --- statistics --------------------------------------------------------------

@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    lower_bound: float
    forward_cost: float
    forward_costs: tuple
    solver_calls: int
    wall_time: float


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    lower_bound: float
    upper_mean: float
    ci_low: float
    ci_high: float
    samples: int
    wall_time: float
    solver_calls: int
    source: str = "training"  # "training": trailing forward passes; "simulation": fresh policy runs

    @property
    def bias_percent(self) -> float:
        return 100.0 * (self.upper_mean - self.lower_bound) / self.upper_mean

    @property
    def ci_ratio_percent(self) -> float:
        return 100.0 * (self.ci_high - self.ci_low) / self.upper_mean


@dataclass
class TrainingStats:
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    regret_trace: list = field(default_factory=list)  # (iteration, mean relative regret)
    stop_reason: str = ""
    window_fraction: float = 0.5

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def lower_bounds(self) -> np.ndarray:
        return np.array([r.lower_bound for r in self.records])

    @property
    def forward_costs(self) -> np.ndarray:
        return np.array([r.forward_cost for r in self.records])

    def forward_sample(self, iteration: int | None = None) -> np.ndarray:
        """Forward-pass costs of the trailing window ending at ``iteration``."""
        k = self.iterations if iteration is None else iteration
        if k < 1 or k > self.iterations:
            raise ValidationError(f"no statistics for iteration {k}")
        size = max(2, math.ceil(self.window_fraction * k))
        window = self.records[max(0, k - size):k]
        return np.array([c for r in window for c in r.forward_costs])

    def training_checkpoint(self, iteration: int | None = None, confidence: float = 0.95) -> Checkpoint:
        """Upper-bound estimate from the training forward passes of the trailing window."""
        k = self.iterations if iteration is None else iteration
        rec = self.records[k - 1]
        return checkpoint_from_costs(self.forward_sample(k), rec, confidence, "training")

    def checkpoint(self, iteration: int | None = None, confidence: float = 0.95) -> Checkpoint:
        """Simulated checkpoint recorded at ``iteration`` if any, else the training estimate."""
        k = self.iterations if iteration is None else iteration
        for cp in self.checkpoints:
            if cp.iteration == k and cp.source == "simulation":
                return cp
        return self.training_checkpoint(k, confidence)


def checkpoint_from_costs(costs, record: IterationRecord, confidence: float, source: str) -> Checkpoint:
    costs = np.asarray(costs, dtype=float)
    mean = float(costs.mean())
    half = float(norm.ppf(0.5 + confidence / 2) * costs.std(ddof=1) / math.sqrt(costs.size)) if costs.size > 1 else 0.0
    return Checkpoint(record.iteration, record.lower_bound, mean, mean - half, mean + half, costs.size,
                      record.wall_time, record.solver_calls, source)


# --- passes ----------------------------------------------------------------

class _Counter:
    def __init__(self):
        self.calls = 0


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def simulate_path(instance: Instance, policy: Policy, path: Sequence, indices=None, counter: _Counter | None = None) -> Trajectory:
    """Run the policy along a fixed sequence of stage realizations."""
    state = instance.initial_state
    states, decisions, costs = [state], [], []
    for t, xi in enumerate(path, start=1):
        try:
            res = solve_stage(instance, t, state, xi, policy.stage_cuts(t))
        except InfeasibilityError as exc:
            raise InfeasibilityError(f"{exc} (trajectory stage {t}, lattice indices {indices})") from exc
        if counter is not None:
            counter.calls += 1
        decisions.append(res.decision)
        costs.append(res.stage_cost)
        state = res.outgoing_state
        states.append(state)
    return Trajectory(states, decisions, list(path), costs, indices, policy.initial_cost)


def sample_indices(lattice: ScenarioLattice, stream: RandomStream) -> list:
    rng = stream.generator()
    return [int(rng.choice(lattice.size(t), p=lattice.probs(t))) for t in range(1, lattice.horizon + 1)]


def forward_pass(instance: Instance, policy: Policy, lattice: ScenarioLattice, stream: RandomStream,
                 counter: _Counter | None = None) -> Trajectory:
    idx = sample_indices(lattice, stream)
    return simulate_path(instance, policy, lattice.path(idx), idx, counter)


def expected_stage_value(instance: Instance, policy: Policy, lattice: ScenarioLattice, t: int, state: SystemState,
                         workers: int = 1, counter: _Counter | None = None) -> tuple[float, np.ndarray]:
    """Probability-weighted stage optimum and state duals over stage ``t``'s realizations."""
    cuts = policy.stage_cuts(t)
    nodes = lattice.realizations(t)

    def solve(xi) -> StageResult:
        return solve_stage(instance, t, state, xi, cuts)

    results = _map(solve, nodes, workers)
    if counter is not None:
        counter.calls += len(results)
    probs = lattice.probs(t)
    value = 0.0
    grad = np.zeros(instance.state_dim)
    for p, res in zip(probs, results):  # ordered reduction
        value += p * res.total_cost
        grad += p * res.state_duals
    return value, grad


def backward_pass(instance: Instance, policy: Policy, trajectory: Trajectory, lattice: ScenarioLattice,
                  workers: int = 1, counter: _Counter | None = None) -> Policy:
    """Add one averaged cut per stage ``t - 1`` for ``t = tau .. 2``, then refresh the bound."""
    for t in range(instance.horizon, 1, -1):
        state = trajectory.states[t - 1]
        value, grad = expected_stage_value(instance, policy, lattice, t, state, workers, counter)
        intercept = value - grad @ state.as_vector()
        policy.cuts[t - 2].append(Cut(t - 1, intercept, grad))
    policy.first_stage_bound = lower_bound(instance, policy, lattice, workers, counter)
    return policy


def lower_bound(instance: Instance, policy: Policy, lattice: ScenarioLattice, workers: int = 1,
                counter: _Counter | None = None) -> float:
    value, _ = expected_stage_value(instance, policy, lattice, 1, instance.initial_state, workers, counter)
    return float(policy.initial_cost + value)


def simulate_lattice_costs(instance: Instance, policy: Policy, lattice: ScenarioLattice, stream: RandomStream,
                           samples: int, workers: int = 1, counter: _Counter | None = None) -> np.ndarray:
    """Policy cost on ``samples`` lattice paths; path ``m`` depends only on ``stream`` and ``m``.

    Calling this at several budgets with one stream therefore compares the
    policies on common scenarios.
    """
    def run(m):
        idx = sample_indices(lattice, stream.child(m))
        return simulate_path(instance, policy, lattice.path(idx), idx).total_cost
    costs = _map(run, list(range(samples)), workers)
    if counter is not None:
        counter.calls += samples * instance.horizon
    return np.array(costs)


# --- stopping ---------------------------------------------------------------

def check_stopping(stats: TrainingStats, rule: StoppingRule, evaluator: Callable[[], float] | None = None,
                   confidence: float = 0.95) -> StopDecision:
    if not stats.records:
        raise ValidationError("check_stopping needs at least one iteration")
    k = stats.iterations
    if isinstance(rule, IterationLimit):
        return StopDecision(k >= rule.limit, f"iteration limit {rule.limit}" if k >= rule.limit else "")
    if isinstance(rule, BoundStall):
        if k <= rule.window:
            return StopDecision(False)
        lb = stats.lower_bounds
        old, new = lb[k - 1 - rule.window], lb[k - 1]
        rel = (new - old) / max(abs(new), 1e-12)
        if rel < rule.tolerance:
            return StopDecision(True, f"bound stalled: {rel:.3g} relative gain over {rule.window} iterations")
        return StopDecision(False)
    if isinstance(rule, SimulationGap):
        if k < 2:
            return StopDecision(False)
        cp = stats.checkpoint(k, rule.confidence)
        gap = (cp.ci_low - cp.lower_bound) / max(abs(cp.upper_mean), 1e-12)
        if gap < rule.gap:
            return StopDecision(True, f"simulation gap {gap:.3g} below {rule.gap}")
        return StopDecision(False)
    if isinstance(rule, AdaptiveRegret):
        if k % rule.period:
            return StopDecision(False)
        if evaluator is None:
            raise ValidationError("AdaptiveRegret needs a regret evaluator")
        stats.regret_trace.append((k, float(evaluator())))
        if len(stats.regret_trace) < 2:
            return StopDecision(False)
        improvement = stats.regret_trace[-2][1] - stats.regret_trace[-1][1]
        if improvement < rule.delta:
            return StopDecision(True, f"regret improved by {improvement:.4g} < {rule.delta} over {rule.period} iterations")
        return StopDecision(False)
    raise ValidationError(f"unknown stopping rule {rule!r}")


# --- training loop -----------------------------------------------------------

@dataclass
class TrainOptions:
    batch_size: int = 1
    max_iterations: int = 5000
    workers: int = 1
    window_fraction: float = 0.5
    confidence: float = 0.95
    checkpoint_iterations: tuple = ()
    checkpoint_samples: int = 0  # 0: checkpoints use the training passes only
    evaluator: Callable | None = None  # policy -> mean relative regret
    on_iteration: Callable | None = None  # (policy, stats) -> None

    def __post_init__(self):
        if self.checkpoint_samples < 0 or self.checkpoint_samples == 1:
            raise ValidationError("checkpoint_samples must be 0 or at least 2")
        if self.batch_size < 1 or self.max_iterations < 1 or self.workers < 1:
            raise ValidationError("batch_size, max_iterations and workers must be positive")
        if not 0 < self.window_fraction <= 1:
            raise ValidationError("window_fraction must lie in (0, 1]")


def train(instance: Instance, lattice: ScenarioLattice, rule: StoppingRule, stream: RandomStream,
          options: TrainOptions | None = None, policy: Policy | None = None) -> tuple[Policy, TrainingStats]:
    options = options or TrainOptions()
    if lattice.horizon != instance.horizon:
        raise ValidationError(f"lattice has {lattice.horizon} stages, instance {instance.horizon}")
    policy = policy or Policy.empty(instance)
    stats = TrainingStats(window_fraction=options.window_fraction)
    safety = IterationLimit(options.max_iterations)
    counter = _Counter()
    start = time.perf_counter()
    paused = 0.0  # checkpoint simulation time, excluded from the training clock
    budgets = set(options.checkpoint_iterations)

    def simulate_checkpoint(rec: IterationRecord) -> None:
        nonlocal paused
        began = time.perf_counter()
        costs = simulate_lattice_costs(instance, policy, lattice, stream.child("checkpoint"),
                                       options.checkpoint_samples, options.workers)
        stats.checkpoints.append(checkpoint_from_costs(costs, rec, options.confidence, "simulation"))
        paused += time.perf_counter() - began
    evaluator = (lambda: options.evaluator(policy)) if options.evaluator else None
    iteration = 0
    while True:
        iteration += 1
        costs = []
        for b in range(options.batch_size):
            traj = forward_pass(instance, policy, lattice, stream.child("forward", iteration, b), counter)
            costs.append(traj.total_cost)
            backward_pass(instance, policy, traj, lattice, options.workers, counter)
        if stats.records and policy.first_stage_bound < stats.records[-1].lower_bound - 1e-9 * (1 + abs(policy.first_stage_bound)):
            log.warning("lower bound decreased at iteration %d", iteration)
        stats.records.append(IterationRecord(
            iteration, policy.first_stage_bound, float(np.mean(costs)), tuple(costs),
            counter.calls, time.perf_counter() - start - paused,
        ))
        if options.checkpoint_samples and iteration in budgets:
            simulate_checkpoint(stats.records[-1])
        if options.on_iteration is not None:
            options.on_iteration(policy, stats)
        decision = check_stopping(stats, rule, evaluator, options.confidence)
        if not decision.stop:
            decision = check_stopping(stats, safety)
        if decision.stop:
            stats.stop_reason = decision.reason
            break
    final = stats.records[-1]
    if options.checkpoint_samples:
        if not stats.checkpoints or stats.checkpoints[-1].iteration != final.iteration:
            simulate_checkpoint(final)
    else:
        stats.checkpoints.append(stats.training_checkpoint(confidence=options.confidence))
    policy.metadata.update({
        "iterations": stats.iterations,
        "seed": stream.seed,
        "lattice_hash": lattice.digest(),
        "stop_reason": stats.stop_reason,
        "solver_calls": counter.calls,
    })
    return policy, stats
