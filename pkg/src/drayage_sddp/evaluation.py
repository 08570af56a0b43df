"""Policy evaluation: extensive-form optima, regret, bias/CI metrics and sensitivity runs.

The extensive form is assembled directly from the transportation model over
a tree of stage nodes, independently of the stage subproblem builder, so it
doubles as an oracle for the decomposition.
"""

from __future__ import annotations

import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Instance, InfeasibilityError, StageRealization, SystemState, ValidationError, holding_cost
from .lpsolve import EQ, LE, LinearProgram, LpBuilder, Status, solve_lp
from .scenario import RandomStream, ScenarioLattice
from .sddp import Policy, TrainingStats, _map, simulate_path

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TreeNode:
    parent: int  # -1 for children of the fixed start state
    stage: int
    realization: StageRealization
    probability: float


def lattice_tree(lattice: ScenarioLattice, first_stage: int = 1) -> list[TreeNode]:
    """Full scenario tree of the lattice from ``first_stage`` to the horizon."""
    nodes: list[TreeNode] = []
    frontier = [(-1, 1.0)]
    for t in range(first_stage, lattice.horizon + 1):
        nxt = []
        for parent, p_parent in frontier:
            for xi, p in zip(lattice.realizations(t), lattice.probs(t)):
                nodes.append(TreeNode(parent, t, xi, p_parent * float(p)))
                nxt.append((len(nodes) - 1, p_parent * float(p)))
        frontier = nxt
    return nodes


def path_tree(scenario: Sequence[StageRealization], first_stage: int = 1) -> list[TreeNode]:
    return [TreeNode(n - 1, first_stage + n, xi, 1.0) for n, xi in enumerate(scenario)]


def build_extensive_form(instance: Instance, nodes: Sequence[TreeNode], start: SystemState) -> LinearProgram:
    """Joint LP over all tree nodes; each node pays holding cost on its end-of-period state."""
    I, J, L = instance.n_entry, instance.n_exit, instance.n_lanes
    gamma, alpha, beta = instance.cost.entry_holding, instance.cost.exit_holding, instance.cost.shortage_penalty
    lp = LpBuilder()
    # per node: dict with column ids
    cols = []
    for n, node in enumerate(nodes):
        p, t, xi = node.probability, node.stage, node.realization
        c = {"contract": [], "spot": [], "entry": [], "plus": [], "minus": []}
        for k, carrier in enumerate(instance.carriers):
            for lane, rate in carrier.contract_rates.items():
                c["contract"].append((k, lane, lp.add_var(f"n{n}:A[{k},{lane}]", p * rate)))
            for lane in range(L):
                c["spot"].append((k, lane, lp.add_var(f"n{n}:A[{k + instance.n_carriers},{lane}]", p * xi.spot_rate[k, lane])))
        for i in range(I):
            c["entry"].append(lp.add_var(f"n{n}:S[{i}]", p * gamma[i], 0.0, instance.entry_capacity[i]))
        for j in range(J):
            c["plus"].append(lp.add_var(f"n{n}:S+[{j}]", p * alpha[j]))
        for j in range(J):
            c["minus"].append(lp.add_var(f"n{n}:S-[{j}]", p * beta[j]))
        cols.append(c)

    for n, node in enumerate(nodes):
        t, xi, c = node.stage, node.realization, cols[n]
        parent = cols[node.parent] if node.parent >= 0 else None
        # capacity per carrier, contract then spot
        for k, carrier in enumerate(instance.carriers):
            cap_c, cap_s = carrier.capacity_at(t)
            lp.add_row(f"n{n}:cap_contract[{k}]", [(v, 1.0) for kk, _, v in c["contract"] if kk == k], LE, cap_c)
            lp.add_row(f"n{n}:cap_spot[{k}]", [(v, 1.0) for kk, _, v in c["spot"] if kk == k], LE, cap_s)
        moves = c["contract"] + c["spot"]
        for i in range(I):
            out_i = [(v, 1.0) for _, lane, v in moves if lane // J == i]
            # shipped - S_i,t  <= Q_i,t   and   shipped - S_i,t + S_i,t+1 = Q_i,t
            if parent is None:
                lp.add_row(f"n{n}:avail[{i}]", out_i, LE, start.entry_stock[i] + xi.inflow[i])
                lp.add_row(f"n{n}:flow_in[{i}]", out_i + [(c["entry"][i], 1.0)], EQ, start.entry_stock[i] + xi.inflow[i])
            else:
                prev = parent["entry"][i]
                lp.add_row(f"n{n}:avail[{i}]", out_i + [(prev, -1.0)], LE, xi.inflow[i])
                lp.add_row(f"n{n}:flow_in[{i}]", out_i + [(prev, -1.0), (c["entry"][i], 1.0)], EQ, xi.inflow[i])
        for j in range(J):
            in_j = [(v, 1.0) for _, lane, v in moves if lane % J == j]
            # arrivals + S+_j,t <= cap   and   arrivals + S+ - S- - S+' + S-' = D
            tail = [(c["plus"][j], -1.0), (c["minus"][j], 1.0)]
            if parent is None:
                lp.add_row(f"n{n}:store[{j}]", in_j, LE, instance.exit_capacity[j] - start.exit_stock[j])
                lp.add_row(f"n{n}:flow_out[{j}]", in_j + tail, EQ,
                           xi.outflow[j] - start.exit_stock[j] + start.exit_shortage[j])
            else:
                plus, minus = parent["plus"][j], parent["minus"][j]
                lp.add_row(f"n{n}:store[{j}]", in_j + [(plus, 1.0)], LE, instance.exit_capacity[j])
                lp.add_row(f"n{n}:flow_out[{j}]", in_j + [(plus, 1.0), (minus, -1.0)] + tail, EQ, xi.outflow[j])
    return lp.build()


def _solve_tree(instance: Instance, nodes, start: SystemState, what: str) -> float:
    sol = solve_lp(build_extensive_form(instance, nodes, start))
    if sol.status is not Status.OPTIMAL:
        raise InfeasibilityError(f"{what}: extensive form is {sol.status.value}; check hub and carrier capacities")
    return sol.objective


def exact_cost_to_go(instance: Instance, lattice: ScenarioLattice, t: int, state: SystemState) -> float:
    """Optimal expected cost of stages ``t+1..tau`` from the end-of-stage-``t`` ``state``."""
    if t >= instance.horizon:
        return 0.0
    return _solve_tree(instance, lattice_tree(lattice, t + 1), state, f"cost-to-go after stage {t}")


def deterministic_equivalent(instance: Instance, lattice: ScenarioLattice) -> float:
    """Optimum of the whole lattice as one LP, including the initial holding charge."""
    value = _solve_tree(instance, lattice_tree(lattice, 1), instance.initial_state, "deterministic equivalent")
    return holding_cost(instance.initial_state, instance.cost) + value


def wait_and_see_cost(instance: Instance, scenario: Sequence[StageRealization]) -> float:
    """Perfect-information optimum for one full-horizon scenario."""
    if len(scenario) != instance.horizon:
        raise ValidationError(f"scenario has {len(scenario)} stages, instance {instance.horizon}")
    value = _solve_tree(instance, path_tree(scenario), instance.initial_state, "wait-and-see")
    return holding_cost(instance.initial_state, instance.cost) + value


def simulate_policy(instance: Instance, policy: Policy, scenarios: Sequence, workers: int = 1) -> np.ndarray:
    """Total cost of the trained policy on each full-horizon scenario (no learning)."""
    def run(item):
        m, scenario = item
        if len(scenario) != instance.horizon:
            raise ValidationError(f"scenario {m} has {len(scenario)} stages, instance {instance.horizon}")
        try:
            return simulate_path(instance, policy, scenario).total_cost
        except InfeasibilityError as exc:
            raise InfeasibilityError(f"scenario {m}: {exc}") from exc
    return np.array(_map(run, list(enumerate(scenarios)), workers))


@dataclass
class RegretSummary:
    values: np.ndarray  # NaN where flagged
    mean: float
    std: float
    quantiles: dict
    flagged: list = field(default_factory=list)


def regret(policy_costs, wait_and_see_costs) -> RegretSummary:
    """Relative excess of the policy over perfect information, per scenario."""
    pc = np.asarray(policy_costs, dtype=float)
    ws = np.asarray(wait_and_see_costs, dtype=float)
    if pc.shape != ws.shape:
        raise ValidationError("policy and wait-and-see cost vectors differ in length")
    flagged = [int(m) for m in np.flatnonzero(ws <= 0)]
    values = np.full(pc.shape, np.nan)
    ok = ws > 0
    values[ok] = (pc[ok] - ws[ok]) / ws[ok]
    good = values[ok]
    if good.size == 0:
        return RegretSummary(values, math.nan, math.nan, {}, flagged)
    qs = {q: float(np.quantile(good, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)}
    std = float(good.std(ddof=1)) if good.size > 1 else 0.0
    return RegretSummary(values, float(good.mean()), std, qs, flagged)


def bias_and_ci(stats: TrainingStats, confidence: float = 0.95, iteration: int | None = None) -> tuple[float, float]:
    """Bias and CI width of the simulated upper bound, both as percent of its mean."""
    if not stats.records:
        raise ValidationError("bias_and_ci needs at least one training iteration")
    cp = stats.checkpoint(iteration, confidence)
    if cp.samples < 2:
        raise ValidationError("bias_and_ci needs at least two forward-cost samples")
    half = 0.5 * (cp.ci_high - cp.ci_low)
    if cp.lower_bound > cp.upper_mean + half + 1e-9 * (1.0 + abs(cp.upper_mean)):
        warnings.warn(f"lower bound {cp.lower_bound:.6g} exceeds the simulated upper bound "
                      f"{cp.upper_mean:.6g} beyond its CI", RuntimeWarning)
    return float(cp.bias_percent), float(cp.ci_ratio_percent)


class RegretEvaluator:
    """Mean relative regret of a policy on a fixed out-of-bag sample; wait-and-see optima are cached."""

    def __init__(self, instance: Instance, scenarios: Sequence, workers: int = 1):
        self.instance = instance
        self.scenarios = list(scenarios)
        self.workers = workers
        self.wait_and_see = np.array(_map(lambda s: wait_and_see_cost(instance, s), self.scenarios, workers))

    def summary(self, policy: Policy) -> RegretSummary:
        return regret(simulate_policy(self.instance, policy, self.scenarios, self.workers), self.wait_and_see)

    def __call__(self, policy: Policy) -> float:
        return self.summary(policy).mean


@dataclass
class EvaluationReport:
    policy_costs: np.ndarray
    wait_and_see_costs: np.ndarray
    regret: RegretSummary
    bias_percent: float | None = None
    ci_ratio_percent: float | None = None
    wall_times: dict = field(default_factory=dict)
    provenance: list = field(default_factory=list)  # stream path per scenario
    notes: list = field(default_factory=list)

    def scenario_table(self) -> str:
        buf = io.StringIO()
        buf.write("scenario,stream,policy_cost,wait_and_see_cost,regret\n")
        for m, (pc, ws, r) in enumerate(zip(self.policy_costs, self.wait_and_see_costs, self.regret.values)):
            src = self.provenance[m] if m < len(self.provenance) else ""
            buf.write(f"{m},{src},{float(pc)!r},{float(ws)!r},{float(r)!r}\n")
        return buf.getvalue()

    def summary_dict(self) -> dict:
        return {
            "scenarios": int(self.policy_costs.size),
            "policy_cost_mean": float(self.policy_costs.mean()),
            "wait_and_see_mean": float(self.wait_and_see_costs.mean()),
            "regret_mean": self.regret.mean,
            "regret_std": self.regret.std,
            "regret_quantiles": {str(q): v for q, v in self.regret.quantiles.items()},
            "flagged_scenarios": self.regret.flagged,
            "bias_percent": self.bias_percent,
            "ci_ratio_percent": self.ci_ratio_percent,
            "notes": list(self.notes),
        }


def evaluate_policy(instance: Instance, policy: Policy, scenarios: Sequence, provenance: Sequence[str] = (),
                    workers: int = 1, stats: TrainingStats | None = None) -> EvaluationReport:
    import time

    t0 = time.perf_counter()
    costs = simulate_policy(instance, policy, scenarios, workers)
    t1 = time.perf_counter()
    ws = np.array(_map(lambda s: wait_and_see_cost(instance, s), list(scenarios), workers))
    t2 = time.perf_counter()
    report = EvaluationReport(costs, ws, regret(costs, ws), provenance=list(provenance),
                              wall_times={"simulate": t1 - t0, "wait_and_see": t2 - t1})
    if stats is not None and stats.iterations >= 1:
        report.bias_percent, report.ci_ratio_percent = bias_and_ci(stats)
    bad = np.flatnonzero(report.regret.values < -1e-6)
    if bad.size:
        report.notes.append(f"scenarios {bad.tolist()} beat perfect information; check solver tolerances")
    return report


@dataclass
class SensitivitySample:
    dimension: str
    values: np.ndarray
    mean: float
    std: float
    quantiles: dict

    def table(self) -> str:
        buf = io.StringIO()
        buf.write("replication,objective\n")
        for r, v in enumerate(self.values):
            buf.write(f"{r},{float(v)!r}\n")
        return buf.getvalue()


def resample_nominal(instance: Instance, dimension: str, rng: np.random.Generator, bounds: tuple) -> list:
    if instance.nominal is None:
        raise ValidationError("sensitivity analysis needs an instance with a nominal scenario")
    lo, hi = bounds
    out = []
    for xi in instance.nominal:
        if dimension == "inflow":
            out.append(StageRealization(rng.uniform(lo, hi, size=instance.n_entry), xi.outflow, xi.spot_rate))
        elif dimension == "spot_rate":
            out.append(StageRealization(xi.inflow, xi.outflow, rng.uniform(lo, hi, size=xi.spot_rate.shape)))
        else:
            raise ValidationError(f"unknown sensitivity dimension {dimension!r}; use 'inflow' or 'spot_rate'")
    return out


def sensitivity_run(instance: Instance, dimension: str, replications: int, stream: RandomStream,
                    bounds: tuple | None = None, workers: int = 1) -> SensitivitySample:
    """Deterministic optimum under repeated resampling of one data block, all else fixed."""
    if replications < 2:
        raise ValidationError("sensitivity_run needs at least two replications")
    if bounds is None:
        bounds = instance.flow_range if dimension == "inflow" else instance.spot_rate_range
    scenarios = [resample_nominal(instance, dimension, stream.child("sensitivity", dimension, r).generator(), bounds)
                 for r in range(replications)]
    values = np.array(_map(lambda s: wait_and_see_cost(instance, s), scenarios, workers))
    qs = {q: float(np.quantile(values, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return SensitivitySample(dimension, values, float(values.mean()), float(values.std(ddof=1)), qs)
