"""Stage subproblem: one period's allocation LP with a cut model of the cost-to-go.

Column order is contract moves (carrier-major over each carrier's contract
lanes), spot moves (carrier-major over all lanes), outgoing entry stocks,
outgoing exit stocks, outgoing exit shortages and finally ``theta``.
Holding cost is charged on the outgoing state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .core import (
    Decision,
    Instance,
    InfeasibilityError,
    StageRealization,
    StructuralError,
    SystemState,
    check_realization,
)
from .lpsolve import EQ, GE, LE, LinearProgram, LpBuilder, Status, solve_lp


@dataclass(frozen=True)
class Cut:
    """``theta >= intercept + gradient @ outgoing_state`` at ``stage``."""

    stage: int
    intercept: float
    gradient: np.ndarray

    def __post_init__(self):
        grad = np.array(self.gradient, dtype=float)
        if grad.ndim != 1 or not np.all(np.isfinite(grad)) or not np.isfinite(self.intercept):
            raise StructuralError("cut must have a finite 1-d gradient and intercept")
        grad.setflags(write=False)
        object.__setattr__(self, "gradient", grad)
        object.__setattr__(self, "intercept", float(self.intercept))

    def value(self, state) -> float:
        vec = state.as_vector() if isinstance(state, SystemState) else np.asarray(state, dtype=float)
        return float(self.intercept + self.gradient @ vec)


@dataclass(frozen=True)
class StageResult:
    decision: Decision
    outgoing_state: SystemState
    stage_cost: float
    total_cost: float
    state_duals: np.ndarray
    theta: float = 0.0


@dataclass(frozen=True)
class StageLayout:
    """Column and row positions inside a stage program."""

    contract_cols: tuple  # (carrier, lane) per contract column
    spot_start: int
    entry_start: int
    exit_stock_start: int
    shortage_start: int
    theta: int
    rows: dict  # block name -> row indices
    n_cut_rows: int

    @property
    def state_start(self) -> int:
        return self.entry_start


@dataclass(frozen=True)
class _Template:
    program: LinearProgram  # static rows with placeholder rhs and spot costs
    layout: StageLayout
    rhs_base: np.ndarray
    entry_rows: np.ndarray  # availability and entry balance rows, per entry hub
    store_rows: np.ndarray
    xbal_rows: np.ndarray


def _template(instance: Instance, t: int, enforce_shortage_limit: bool) -> _Template:
    cache = instance.__dict__.get("_stage_templates")
    if cache is None:
        cache = {}
        # frozen dataclass: attach the cache outside the declared fields
        object.__setattr__(instance, "_stage_templates", cache)
    key = (t, enforce_shortage_limit)
    if key not in cache:
        cache[key] = _build_template(instance, t, enforce_shortage_limit)
    return cache[key]


def _build_template(instance: Instance, t: int, enforce_shortage_limit: bool) -> _Template:
    I, J, L, K = instance.n_entry, instance.n_exit, instance.n_lanes, instance.n_carriers
    cost = instance.cost
    lp = LpBuilder()

    contract_cols = []
    for k, carrier in enumerate(instance.carriers):
        for lane, rate in carrier.contract_rates.items():
            lp.add_var(f"contract[{carrier.id},{lane}]", rate)
            contract_cols.append((k, lane))
    spot_start = lp.n_cols
    for k, carrier in enumerate(instance.carriers):
        for lane in range(L):
            lp.add_var(f"spot[{carrier.id},{lane}]", 0.0)
    entry_start = lp.n_cols
    for i, hub in enumerate(instance.entry_hubs):
        lp.add_var(f"entry_stock[{hub}]", cost.entry_holding[i], 0.0, instance.entry_capacity[i])
    exit_stock_start = lp.n_cols
    for j, hub in enumerate(instance.exit_hubs):
        lp.add_var(f"exit_stock[{hub}]", cost.exit_holding[j])
    shortage_start = lp.n_cols
    limit = instance.shortage_limit if enforce_shortage_limit else None
    for j, hub in enumerate(instance.exit_hubs):
        upper = limit[j] if limit is not None else np.inf
        lp.add_var(f"exit_shortage[{hub}]", cost.shortage_penalty[j], 0.0, upper)
    theta = lp.add_var("theta", 1.0)

    # lane -> columns moving containers over it
    lane_cols: list[list[int]] = [[] for _ in range(L)]
    for col, (k, lane) in enumerate(contract_cols):
        lane_cols[lane].append(col)
    for k in range(K):
        for lane in range(L):
            lane_cols[lane].append(spot_start + k * L + lane)

    rows: dict[str, list[int]] = {name: [] for name in ("contract_cap", "spot_cap", "availability",
                                                        "exit_storage", "entry_balance", "exit_balance", "cuts")}
    for k, carrier in enumerate(instance.carriers):
        contract_cap, _ = carrier.capacity_at(t)
        cols = [c for c, (kk, _) in enumerate(contract_cols) if kk == k]
        rows["contract_cap"].append(lp.add_row(f"contract_cap[{carrier.id}]", [(c, 1.0) for c in cols], LE, contract_cap))
    for k, carrier in enumerate(instance.carriers):
        _, spot_cap = carrier.capacity_at(t)
        cols = range(spot_start + k * L, spot_start + (k + 1) * L)
        rows["spot_cap"].append(lp.add_row(f"spot_cap[{carrier.id}]", [(c, 1.0) for c in cols], LE, spot_cap))

    def from_hub(i):
        return [c for j in range(J) for c in lane_cols[instance.lane_index(i, j)]]

    def into_hub(j):
        return [c for i in range(I) for c in lane_cols[instance.lane_index(i, j)]]

    # rhs of the state-dependent rows is filled in per call
    for i, hub in enumerate(instance.entry_hubs):
        rows["availability"].append(lp.add_row(f"availability[{hub}]", [(c, 1.0) for c in from_hub(i)], LE, 0.0))
    for j, hub in enumerate(instance.exit_hubs):
        rows["exit_storage"].append(lp.add_row(
            f"exit_storage[{hub}]", [(c, 1.0) for c in into_hub(j)], LE, instance.exit_capacity[j]))
    for i, hub in enumerate(instance.entry_hubs):
        coefs = [(c, 1.0) for c in from_hub(i)] + [(entry_start + i, 1.0)]
        rows["entry_balance"].append(lp.add_row(f"entry_balance[{hub}]", coefs, EQ, 0.0))
    for j, hub in enumerate(instance.exit_hubs):
        coefs = [(c, 1.0) for c in into_hub(j)] + [(exit_stock_start + j, -1.0), (shortage_start + j, 1.0)]
        rows["exit_balance"].append(lp.add_row(f"exit_balance[{hub}]", coefs, EQ, 0.0))

    program = lp.build()
    for arr in (program.lower, program.upper):
        arr.setflags(write=False)
    layout = StageLayout(
        tuple(contract_cols), spot_start, entry_start, exit_stock_start, shortage_start, theta,
        {k: tuple(v) for k, v in rows.items()}, 0,
    )
    return _Template(
        program, layout, program.rhs.copy(),
        np.array(rows["availability"] + rows["entry_balance"]).reshape(2, I),
        np.array(rows["exit_storage"]), np.array(rows["exit_balance"]),
    )


def build_stage_subproblem(
    instance: Instance,
    t: int,
    incoming: SystemState,
    realization: StageRealization,
    cuts=(),
    enforce_shortage_limit: bool = False,
) -> tuple[LinearProgram, StageLayout]:
    """Stage-``t`` allocation LP for ``incoming`` under ``realization`` with ``cuts``."""
    if not 1 <= t <= instance.horizon:
        raise StructuralError(f"stage {t} outside 1..{instance.horizon}")
    check_realization(instance, realization)
    tpl = _template(instance, t, enforce_shortage_limit)
    base, layout = tpl.program, tpl.layout
    m0, n = base.shape

    objective = base.objective.copy()
    objective[layout.spot_start:layout.entry_start] = realization.spot_rate.ravel()
    rhs = tpl.rhs_base.copy()
    available = incoming.entry_stock + realization.inflow
    rhs[tpl.entry_rows[0]] = available
    rhs[tpl.entry_rows[1]] = available
    rhs[tpl.store_rows] -= incoming.exit_stock
    rhs[tpl.xbal_rows] = realization.outflow - incoming.exit_stock + incoming.exit_shortage

    cuts = tuple(cuts)
    if not cuts:
        program = LinearProgram(objective, base.matrix, base.senses, rhs, base.lower, base.upper,
                                base.row_names, base.col_names)
        return program, layout
    dim = instance.state_dim
    for cut in cuts:
        if cut.gradient.size != dim:
            raise StructuralError(f"cut gradient has {cut.gradient.size} entries, state layout has {dim}")
        if cut.stage != t:
            raise StructuralError(f"cut for stage {cut.stage} passed to stage {t}")
    n_cuts = len(cuts)
    block = np.zeros((n_cuts, n))
    block[:, layout.theta] = 1.0
    block[:, layout.entry_start:layout.entry_start + dim] = -np.array([c.gradient for c in cuts])
    matrix = sp.vstack([base.matrix, sp.csr_matrix(block)], format="csr")
    rows = dict(layout.rows)
    rows["cuts"] = tuple(range(m0, m0 + n_cuts))
    layout = replace(layout, rows=rows, n_cut_rows=n_cuts)
    program = LinearProgram(
        objective, matrix, base.senses + (GE,) * n_cuts,
        np.concatenate([rhs, [c.intercept for c in cuts]]), base.lower, base.upper,
        base.row_names + [f"cut[{k}]" for k in range(n_cuts)], base.col_names,
    )
    return program, layout


def state_duals(instance: Instance, layout: StageLayout, duals: np.ndarray) -> np.ndarray:
    """Sensitivity of the stage optimum to each incoming state coordinate."""
    r = layout.rows
    avail, store = duals[list(r["availability"])], duals[list(r["exit_storage"])]
    ebal, xbal = duals[list(r["entry_balance"])], duals[list(r["exit_balance"])]
    return np.concatenate([avail + ebal, -store - xbal, xbal])


def _diagnose(instance: Instance, t: int, incoming: SystemState, realization: StageRealization) -> str:
    lanes = instance.n_exit
    reasons = []
    shippable = np.zeros(instance.n_entry)
    for carrier in instance.carriers:
        contract_cap, spot_cap = carrier.capacity_at(t)
        hubs = {lane // lanes for lane in carrier.contract_lanes}
        for i in hubs:
            shippable[i] += contract_cap
        shippable += spot_cap
    available = incoming.entry_stock + realization.inflow
    over = available - shippable - instance.entry_capacity
    for i in np.flatnonzero(over > 1e-9):
        reasons.append(
            f"entry hub {instance.entry_hubs[i]} holds {available[i]:.6g} TEU but can ship at most "
            f"{shippable[i]:.6g} and store {instance.entry_capacity[i]:.6g}"
        )
    if not reasons:
        worst = int(np.argmax(available - instance.entry_capacity))
        reasons.append(f"capacity configuration around entry hub {instance.entry_hubs[worst]} (joint carrier limits)")
    return "; ".join(reasons)


def solve_stage(
    instance: Instance,
    t: int,
    incoming: SystemState,
    realization: StageRealization,
    cuts=(),
    enforce_shortage_limit: bool = False,
) -> StageResult:
    program, layout = build_stage_subproblem(instance, t, incoming, realization, cuts, enforce_shortage_limit)
    sol = solve_lp(program)
    if sol.status is Status.INFEASIBLE:
        raise InfeasibilityError(f"stage {t} infeasible: {_diagnose(instance, t, incoming, realization)}")
    if sol.status is not Status.OPTIMAL:
        raise InfeasibilityError(f"stage {t} returned {sol.status.value}")
    x = sol.primal
    K, L = instance.n_carriers, instance.n_lanes
    contract = np.zeros((K, L))
    for col, (k, lane) in enumerate(layout.contract_cols):
        contract[k, lane] = x[col]
    spot = x[layout.spot_start:layout.entry_start].reshape(K, L)
    decision = Decision(np.maximum(contract, 0.0), np.maximum(spot, 0.0))
    I, J = instance.n_entry, instance.n_exit
    entry = x[layout.entry_start:layout.entry_start + I]
    net = x[layout.exit_stock_start:layout.exit_stock_start + J] - x[layout.shortage_start:layout.shortage_start + J]
    outgoing = SystemState.from_net(np.maximum(entry, 0.0), net)
    theta = float(x[layout.theta])
    return StageResult(
        decision=decision,
        outgoing_state=outgoing,
        stage_cost=sol.objective - theta,
        total_cost=sol.objective,
        state_duals=state_duals(instance, layout, sol.duals),
        theta=theta,
    )
