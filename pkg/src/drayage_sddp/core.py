"""Domain types, stage cost functions and the deterministic state transition.

Every quantity is measured in TEU (containers) or dollars.  Lanes are
``(entry_index, exit_index)`` pairs enumerated row-major, so lane ``l``
connects entry hub ``l // J`` with exit hub ``l % J``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

FEAS_TOL = 1e-9


class DrayageError(Exception):
    """Base class for errors raised by this package."""


class StructuralError(DrayageError, ValueError):
    """Inputs have inconsistent shapes or reference unknown lanes/hubs."""


class ValidationError(DrayageError, ValueError):
    """A value violates a documented invariant."""


class InfeasibilityError(DrayageError):
    """A stage or transition has no feasible completion."""


def _frozen_array(values, shape=None, name="array") -> np.ndarray:
    arr = np.array(values, dtype=float)
    if shape is not None and arr.shape != shape:
        raise StructuralError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CostParams:
    entry_holding: np.ndarray
    exit_holding: np.ndarray
    shortage_penalty: np.ndarray

    def __post_init__(self):
        for name in ("entry_holding", "exit_holding", "shortage_penalty"):
            arr = _frozen_array(getattr(self, name), name=name)
            if arr.ndim != 1:
                raise StructuralError(f"{name} must be a vector")
            if np.any(arr < 0):
                raise ValidationError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)
        if self.exit_holding.shape != self.shortage_penalty.shape:
            raise StructuralError("exit_holding and shortage_penalty differ in length")


@dataclass(frozen=True)
class SystemState:
    """Stocks at entry hubs plus the stock/shortage split at exit hubs."""

    entry_stock: np.ndarray
    exit_stock: np.ndarray
    exit_shortage: np.ndarray

    def __post_init__(self):
        for name in ("entry_stock", "exit_stock", "exit_shortage"):
            arr = _frozen_array(getattr(self, name), name=name)
            if arr.ndim != 1:
                raise StructuralError(f"{name} must be a vector")
            if np.any(arr < -FEAS_TOL):
                raise ValidationError(f"{name} has negative entries: {arr}")
            object.__setattr__(self, name, arr)
        if self.exit_stock.shape != self.exit_shortage.shape:
            raise StructuralError("exit_stock and exit_shortage differ in length")
        if np.any(self.exit_stock * self.exit_shortage > FEAS_TOL * (1.0 + self.exit_stock + self.exit_shortage)):
            raise ValidationError("exit stock and shortage must be complementary")

    @classmethod
    def zeros(cls, n_entry: int, n_exit: int) -> "SystemState":
        return cls(np.zeros(n_entry), np.zeros(n_exit), np.zeros(n_exit))

    @classmethod
    def from_net(cls, entry_stock, exit_net) -> "SystemState":
        """Canonical split of a net exit position into stock and shortage."""
        net = np.asarray(exit_net, dtype=float)
        entry = np.asarray(entry_stock, dtype=float)
        entry = np.where(np.abs(entry) <= FEAS_TOL, 0.0, entry)
        return cls(entry, np.maximum(net, 0.0), np.maximum(-net, 0.0))

    @classmethod
    def from_vector(cls, vec, n_entry: int) -> "SystemState":
        vec = np.asarray(vec, dtype=float)
        n_exit = (vec.size - n_entry) // 2
        if n_entry + 2 * n_exit != vec.size:
            raise StructuralError(f"state vector of length {vec.size} does not fit {n_entry} entry hubs")
        return cls(vec[:n_entry], vec[n_entry:n_entry + n_exit], vec[n_entry + n_exit:])

    @property
    def exit_net(self) -> np.ndarray:
        return self.exit_stock - self.exit_shortage

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.entry_stock, self.exit_stock, self.exit_shortage])

    def __eq__(self, other):
        if not isinstance(other, SystemState):
            return NotImplemented
        return np.array_equal(self.as_vector(), other.as_vector())

    def __hash__(self):
        return hash(self.as_vector().tobytes())


@dataclass(frozen=True)
class Carrier:
    """A carrier with a contract block on ``contract_rates.keys()`` and a spot block on every lane.

    ``contract_capacity`` and ``spot_capacity`` hold one value per stage.
    """

    id: str
    contract_rates: Mapping[int, float]
    contract_capacity: tuple
    spot_capacity: tuple

    def __post_init__(self):
        rates = {int(lane): float(rate) for lane, rate in sorted(self.contract_rates.items())}
        if any(r < 0 or not np.isfinite(r) for r in rates.values()):
            raise ValidationError(f"carrier {self.id}: contract rates must be finite and nonnegative")
        object.__setattr__(self, "contract_rates", rates)
        for name in ("contract_capacity", "spot_capacity"):
            caps = tuple(float(c) for c in np.atleast_1d(getattr(self, name)))
            if any(c < 0 for c in caps):
                raise ValidationError(f"carrier {self.id}: {name} must be nonnegative")
            object.__setattr__(self, name, caps)

    @property
    def contract_lanes(self) -> tuple:
        return tuple(self.contract_rates)

    def capacity_at(self, t: int) -> tuple[float, float]:
        """Contract and spot capacity at stage ``t`` (1-based)."""
        def pick(caps):
            return caps[t - 1] if len(caps) > 1 else caps[0]
        return pick(self.contract_capacity), pick(self.spot_capacity)


@dataclass(frozen=True)
class StageRealization:
    inflow: np.ndarray
    outflow: np.ndarray
    spot_rate: np.ndarray  # (carriers, lanes)

    def __post_init__(self):
        for name in ("inflow", "outflow", "spot_rate"):
            arr = _frozen_array(getattr(self, name), name=name)
            if np.any(arr < 0):
                raise ValidationError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)
        if self.spot_rate.ndim != 2:
            raise StructuralError("spot_rate must be a (carriers, lanes) matrix")


@dataclass(frozen=True)
class Decision:
    """Moves per (carrier, lane); contract entries outside a carrier's lanes must be zero."""

    contract_moves: np.ndarray
    spot_moves: np.ndarray

    def __post_init__(self):
        for name in ("contract_moves", "spot_moves"):
            arr = _frozen_array(getattr(self, name), name=name)
            if arr.ndim != 2:
                raise StructuralError(f"{name} must be a (carriers, lanes) matrix")
            if np.any(arr < -FEAS_TOL):
                raise ValidationError(f"{name} has negative entries")
            object.__setattr__(self, name, arr)
        if self.contract_moves.shape != self.spot_moves.shape:
            raise StructuralError("contract and spot blocks differ in shape")

    @classmethod
    def zeros(cls, n_carriers: int, n_lanes: int) -> "Decision":
        return cls(np.zeros((n_carriers, n_lanes)), np.zeros((n_carriers, n_lanes)))

    @property
    def lane_totals(self) -> np.ndarray:
        return (self.contract_moves + self.spot_moves).sum(axis=0)


@dataclass(frozen=True)
class Instance:
    entry_hubs: tuple
    exit_hubs: tuple
    horizon: int
    carriers: tuple
    cost: CostParams
    entry_capacity: np.ndarray
    exit_capacity: np.ndarray
    initial_state: SystemState
    shortage_limit: np.ndarray | None = None
    nominal: tuple | None = None  # one StageRealization per stage, if known
    spot_rate_range: tuple = (3.0, 9.0)
    flow_range: tuple = (1000.0, 3000.0)
    name: str = "instance"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entry_hubs", tuple(str(h) for h in self.entry_hubs))
        object.__setattr__(self, "exit_hubs", tuple(str(h) for h in self.exit_hubs))
        object.__setattr__(self, "carriers", tuple(self.carriers))
        if not self.entry_hubs or not self.exit_hubs:
            raise ValidationError("entry_hubs and exit_hubs must be non-empty")
        if set(self.entry_hubs) & set(self.exit_hubs):
            raise ValidationError("entry and exit hub ids must be disjoint")
        if len(set(self.entry_hubs)) != len(self.entry_hubs) or len(set(self.exit_hubs)) != len(self.exit_hubs):
            raise ValidationError("hub ids must be unique")
        if int(self.horizon) < 1:
            raise ValidationError("horizon must be at least 1")
        object.__setattr__(self, "horizon", int(self.horizon))
        I, J = self.n_entry, self.n_exit
        object.__setattr__(self, "entry_capacity", _frozen_array(self.entry_capacity, (I,), "entry_capacity"))
        object.__setattr__(self, "exit_capacity", _frozen_array(self.exit_capacity, (J,), "exit_capacity"))
        if np.any(self.entry_capacity < 0) or np.any(self.exit_capacity < 0):
            raise ValidationError("capacities must be nonnegative")
        if self.shortage_limit is not None:
            limit = _frozen_array(self.shortage_limit, (J,), "shortage_limit")
            if np.any(limit < 0):
                raise ValidationError("shortage_limit must be nonnegative")
            object.__setattr__(self, "shortage_limit", limit)
        if self.cost.entry_holding.shape != (I,) or self.cost.exit_holding.shape != (J,):
            raise StructuralError("cost vectors do not match hub counts")
        if not self.carriers:
            raise ValidationError("at least one carrier is required")
        ids = [c.id for c in self.carriers]
        if len(set(ids)) != len(ids):
            raise ValidationError("carrier ids must be unique")
        for c in self.carriers:
            if any(lane < 0 or lane >= self.n_lanes for lane in c.contract_lanes):
                raise StructuralError(f"carrier {c.id} references a lane outside 0..{self.n_lanes - 1}")
            for caps in (c.contract_capacity, c.spot_capacity):
                if len(caps) not in (1, self.horizon):
                    raise StructuralError(f"carrier {c.id}: capacity must have 1 or {self.horizon} entries")
        s = self.initial_state
        if s.entry_stock.shape != (I,) or s.exit_stock.shape != (J,):
            raise StructuralError("initial_state does not match hub counts")
        if np.any(s.entry_stock > self.entry_capacity + FEAS_TOL) or np.any(s.exit_stock > self.exit_capacity + FEAS_TOL):
            raise ValidationError("initial_state exceeds hub capacity")
        if self.nominal is not None:
            nominal = tuple(self.nominal)
            if len(nominal) != self.horizon:
                raise StructuralError("nominal scenario must have one realization per stage")
            for xi in nominal:
                check_realization(self, xi)
            object.__setattr__(self, "nominal", nominal)
        lo, hi = (float(v) for v in self.spot_rate_range)
        if not 0 <= lo <= hi:
            raise ValidationError("spot_rate_range must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "spot_rate_range", (lo, hi))
        flo, fhi = (float(v) for v in self.flow_range)
        if not 0 <= flo <= fhi:
            raise ValidationError("flow_range must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "flow_range", (flo, fhi))

    @property
    def flow_rate(self) -> float:
        """Default Poisson intensity: the midpoint of the nominal flow range."""
        return 0.5 * (self.flow_range[0] + self.flow_range[1])

    @property
    def n_entry(self) -> int:
        return len(self.entry_hubs)

    @property
    def n_exit(self) -> int:
        return len(self.exit_hubs)

    @property
    def n_lanes(self) -> int:
        return self.n_entry * self.n_exit

    @property
    def n_carriers(self) -> int:
        return len(self.carriers)

    @property
    def state_dim(self) -> int:
        return self.n_entry + 2 * self.n_exit

    def lane(self, index: int) -> tuple[int, int]:
        return divmod(index, self.n_exit)

    def lane_index(self, i: int, j: int) -> int:
        return i * self.n_exit + j

    def contract_rate_matrix(self) -> np.ndarray:
        """Rates as a (carriers, lanes) matrix; NaN where a carrier has no contract."""
        w = np.full((self.n_carriers, self.n_lanes), np.nan)
        for k, c in enumerate(self.carriers):
            for lane, rate in c.contract_rates.items():
                w[k, lane] = rate
        return w

    def contract_mask(self) -> np.ndarray:
        return ~np.isnan(self.contract_rate_matrix())

    def shipped_from(self, lane_totals) -> np.ndarray:
        return np.asarray(lane_totals).reshape(self.n_entry, self.n_exit).sum(axis=1)

    def shipped_into(self, lane_totals) -> np.ndarray:
        return np.asarray(lane_totals).reshape(self.n_entry, self.n_exit).sum(axis=0)

    def with_nominal(self, nominal: Sequence[StageRealization]) -> "Instance":
        from dataclasses import replace
        return replace(self, nominal=tuple(nominal))


def check_realization(instance: Instance, xi: StageRealization) -> None:
    if xi.inflow.shape != (instance.n_entry,) or xi.outflow.shape != (instance.n_exit,):
        raise StructuralError("realization flow vectors do not match hub counts")
    if xi.spot_rate.shape != (instance.n_carriers, instance.n_lanes):
        raise StructuralError(
            f"spot_rate must have shape {(instance.n_carriers, instance.n_lanes)}, got {xi.spot_rate.shape}"
        )


def holding_cost(state, cost: CostParams) -> float:
    """Inventory cost of a state: entry holding plus exit holding and shortage.

    ``state`` is a :class:`SystemState` or a raw ``(entry, exit_stock,
    exit_shortage)`` triple; the latter skips the state invariants so the
    linear form can be evaluated on arbitrary components.
    """
    if isinstance(state, SystemState):
        entry, stock, shortage = state.entry_stock, state.exit_stock, state.exit_shortage
    else:
        entry, stock, shortage = (np.asarray(v, dtype=float) for v in state)
    if (entry.shape != cost.entry_holding.shape or stock.shape != cost.exit_holding.shape
            or shortage.shape != cost.shortage_penalty.shape):
        raise StructuralError("state and cost vectors differ in dimension")
    return float(cost.entry_holding @ entry + cost.exit_holding @ stock + cost.shortage_penalty @ shortage)


def transport_cost(decision: Decision, carriers: Sequence[Carrier], spot_rates) -> float:
    n_lanes = decision.contract_moves.shape[1]
    if decision.contract_moves.shape[0] != len(carriers):
        raise StructuralError("decision rows do not match the carrier list")
    spot_rates = np.asarray(spot_rates, dtype=float)
    if spot_rates.shape != decision.spot_moves.shape:
        raise StructuralError("spot rates do not cover every (carrier, lane) pair")
    total = 0.0
    for k, carrier in enumerate(carriers):
        moves = decision.contract_moves[k]
        used = np.flatnonzero(moves > 0)
        for lane in used:
            if lane not in carrier.contract_rates:
                raise StructuralError(f"carrier {carrier.id} has no contract on lane {lane}")
        if any(lane >= n_lanes for lane in carrier.contract_lanes):
            raise StructuralError(f"carrier {carrier.id} references lane beyond {n_lanes}")
        total += sum(carrier.contract_rates[int(lane)] * moves[lane] for lane in used)
    total += float(np.sum(spot_rates * decision.spot_moves))
    return float(total)


def state_transition(
    state: SystemState, decision: Decision, realization: StageRealization, instance: Instance | None = None
) -> SystemState:
    """Next state from stock balances; the exit position is split canonically."""
    n_entry, n_exit = state.entry_stock.size, state.exit_stock.size
    lanes = decision.lane_totals
    if lanes.size != n_entry * n_exit:
        raise StructuralError(f"decision covers {lanes.size} lanes, state implies {n_entry * n_exit}")
    grid = lanes.reshape(n_entry, n_exit)
    entry = state.entry_stock + realization.inflow - grid.sum(axis=1)
    scale = 1.0 + np.abs(state.entry_stock) + np.abs(realization.inflow)
    if np.any(entry < -FEAS_TOL * scale):
        bad = int(np.argmin(entry))
        label = instance.entry_hubs[bad] if instance is not None else bad
        raise InfeasibilityError(f"entry hub {label} ships {grid.sum(axis=1)[bad]:.6g} TEU but holds less")
    entry = np.maximum(entry, 0.0)
    net = state.exit_net + grid.sum(axis=0) - realization.outflow
    net = np.where(np.abs(net) <= FEAS_TOL * (1.0 + np.abs(realization.outflow)), 0.0, net)
    return SystemState.from_net(entry, net)
