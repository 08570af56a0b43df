"""Reproducible instance generators: the 2x2 illustration and the bid-pool practical family."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .core import Carrier, CostParams, Instance, StageRealization, SystemState, ValidationError
from .scenario import RandomStream

SMALL_FLOW_LEVELS = (10, 15, 20, 25, 30)
SMALL_CAPACITY_LEVELS = (10, 15, 20)
SMALL_SPOT_CAPACITY = 5.0


def gen_small_instance(stream: RandomStream, horizon: int = 12) -> Instance:
    """Two entry and two exit hubs with 100 TEU capacity and two carriers on all four lanes."""
    rng = stream.generator()
    n_entry = n_exit = 2
    lanes = n_entry * n_exit
    carriers = []
    for k in range(2):
        rates = rng.uniform(7.0, 9.9, size=lanes)
        caps = rng.choice(SMALL_CAPACITY_LEVELS, size=horizon).astype(float)
        carriers.append(Carrier(
            id=f"carrier{k + 1}",
            contract_rates={lane: float(r) for lane, r in enumerate(rates)},
            contract_capacity=tuple(caps),
            spot_capacity=(SMALL_SPOT_CAPACITY,) * horizon,
        ))
    nominal = []
    for _ in range(horizon):
        nominal.append(StageRealization(
            rng.choice(SMALL_FLOW_LEVELS, size=n_entry).astype(float),
            rng.choice(SMALL_FLOW_LEVELS, size=n_exit).astype(float),
            rng.uniform(3.5, 8.0, size=(2, lanes)),
        ))
    return Instance(
        entry_hubs=("E1", "E2"),
        exit_hubs=("X3", "X4"),
        horizon=horizon,
        carriers=tuple(carriers),
        cost=CostParams([20.0, 20.0], [10.0, 10.0], [30.0, 30.0]),
        entry_capacity=[100.0, 100.0],
        exit_capacity=[100.0, 100.0],
        initial_state=SystemState.zeros(n_entry, n_exit),
        nominal=tuple(nominal),
        spot_rate_range=(3.5, 8.0),
        flow_range=(float(min(SMALL_FLOW_LEVELS)), float(max(SMALL_FLOW_LEVELS))),
        name="small",
        meta={"kind": "small", "seed": stream.seed},
    )


@dataclass(frozen=True)
class PracticalSpec:
    periods: int = 12
    entry_hubs: int = 6
    exit_hubs: int = 6
    carriers: int = 20
    bid_pool: int = 10
    bids_per_carrier: tuple = (1, 2)
    lanes_per_bid: tuple = (6, 18)
    initial_entry_stock: tuple = (0.0, 500.0)
    initial_exit_stock: tuple = (0.0, 1000.0)
    hub_capacity: float = 10_000.0
    contract_capacity: tuple = (400.0, 800.0)
    spot_buffer: float = 40.0
    entry_holding: float = 20.0
    exit_holding: float = 10.0
    shortage_penalty: float = 30.0
    contract_rate: tuple = (6.0, 8.0)
    spot_rate: tuple = (3.0, 9.0)
    flow: tuple = (1000.0, 3000.0)
    max_retries: int = 50

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (list, tuple)):
                value = tuple(value)
                object.__setattr__(self, f.name, value)
                if len(value) != 2 or value[0] < 0 or value[0] > value[1]:
                    raise ValidationError(f"{f.name} must be an ordered nonnegative (low, high) pair")
            elif value < 0:
                raise ValidationError(f"{f.name} must be nonnegative")
        for name in ("periods", "entry_hubs", "exit_hubs", "carriers", "bid_pool"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if self.bids_per_carrier[1] > self.bid_pool:
            raise ValidationError("bids_per_carrier exceeds the bid pool")
        if self.lanes_per_bid[0] < 1:
            raise ValidationError("lanes_per_bid must be at least 1")

    @classmethod
    def downsized(cls, entry_hubs: int = 3, exit_hubs: int = 3, carriers: int = 6, **overrides) -> "PracticalSpec":
        """Smaller network whose flows are scaled to keep the full family's load per carrier."""
        full = cls()
        ratio = (carriers / entry_hubs) / (full.carriers / full.entry_hubs)
        flow = (round(full.flow[0] * ratio), round(full.flow[1] * ratio))
        return replace(full, entry_hubs=entry_hubs, exit_hubs=exit_hubs, carriers=carriers, flow=flow, **overrides)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "PracticalSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown spec field(s): {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def gen_practical_instance(spec: PracticalSpec, stream: RandomStream) -> Instance:
    """Carriers win one or two bids from a pool of random lane bundles."""
    rng = stream.generator()
    I, J, T = spec.entry_hubs, spec.exit_hubs, spec.periods
    n_lanes = I * J
    lo_lanes = min(spec.lanes_per_bid[0], n_lanes)
    hi_lanes = min(spec.lanes_per_bid[1], n_lanes)
    pool = []
    for _ in range(spec.bid_pool):
        size = int(rng.integers(lo_lanes, hi_lanes + 1))
        pool.append(np.sort(rng.choice(n_lanes, size=size, replace=False)))

    carriers = []
    for k in range(spec.carriers):
        for _attempt in range(spec.max_retries):
            n_bids = int(rng.integers(spec.bids_per_carrier[0], spec.bids_per_carrier[1] + 1))
            won = rng.choice(spec.bid_pool, size=n_bids, replace=False)
            lanes = sorted(set(int(lane) for b in won for lane in pool[b]))
            if lanes:
                break
        else:
            raise ValidationError(f"carrier {k + 1} received no contract lanes after {spec.max_retries} retries")
        rates = rng.uniform(*spec.contract_rate, size=len(lanes))
        cap = float(rng.integers(int(spec.contract_capacity[0]), int(spec.contract_capacity[1]) + 1))
        carriers.append(Carrier(
            id=f"carrier{k + 1}",
            contract_rates={lane: float(r) for lane, r in zip(lanes, rates)},
            contract_capacity=(cap,) * T,
            spot_capacity=(float(spec.spot_buffer),) * T,
        ))

    entry0 = rng.integers(int(spec.initial_entry_stock[0]), int(spec.initial_entry_stock[1]) + 1, size=I)
    exit0 = rng.integers(int(spec.initial_exit_stock[0]), int(spec.initial_exit_stock[1]) + 1, size=J)
    nominal = []
    for _ in range(T):
        nominal.append(StageRealization(
            rng.integers(int(spec.flow[0]), int(spec.flow[1]) + 1, size=I).astype(float),
            rng.integers(int(spec.flow[0]), int(spec.flow[1]) + 1, size=J).astype(float),
            rng.uniform(*spec.spot_rate, size=(spec.carriers, n_lanes)),
        ))
    instance = Instance(
        entry_hubs=tuple(f"E{i + 1}" for i in range(I)),
        exit_hubs=tuple(f"X{j + 1}" for j in range(J)),
        horizon=T,
        carriers=tuple(carriers),
        cost=CostParams(np.full(I, spec.entry_holding), np.full(J, spec.exit_holding), np.full(J, spec.shortage_penalty)),
        entry_capacity=np.full(I, spec.hub_capacity),
        exit_capacity=np.full(J, spec.hub_capacity),
        initial_state=SystemState(entry0.astype(float), exit0.astype(float), np.zeros(J)),
        nominal=tuple(nominal),
        spot_rate_range=tuple(spec.spot_rate),
        flow_range=tuple(spec.flow),
        name=f"practical-{I}x{J}-{spec.carriers}",
        meta={"kind": "practical", "seed": stream.seed, "bid_pool": [b.tolist() for b in pool]},
    )
    issues = validate_recourse(instance, max_inflow=spec.flow[1])
    instance.meta["recourse_issues"] = issues
    return instance


def validate_recourse(instance: Instance, max_inflow: float | None = None) -> list[str]:
    """Capacity checks that keep every stage subproblem feasible; returns a list of issues.

    Per stage, the largest inflow must fit into entry storage plus what the
    carriers can move.  Over the horizon, the initial entry stock plus the
    mean inflow accumulated beyond shipping capacity must fit into entry
    storage.
    """
    if max_inflow is None:
        if instance.nominal is None:
            max_inflow = instance.flow_rate + 6.0 * np.sqrt(instance.flow_rate)
        else:
            max_inflow = max(float(xi.inflow.max()) for xi in instance.nominal)
    issues = []
    total_entry = float(instance.entry_capacity.sum())
    stock = float(instance.initial_state.entry_stock.sum())
    for t in range(1, instance.horizon + 1):
        moved = sum(sum(c.capacity_at(t)) for c in instance.carriers)
        inflow = max_inflow * instance.n_entry
        if inflow > total_entry + moved:
            issues.append(f"stage {t}: inflow {inflow:.6g} exceeds entry capacity plus carrier capacity {total_entry + moved:.6g}")
        stock = max(stock + instance.flow_rate * instance.n_entry - moved, 0.0)
        if stock > total_entry:
            issues.append(f"stage {t}: accumulated entry stock {stock:.6g} may exceed entry capacity {total_entry:.6g}")
            break
    covered = np.zeros(instance.n_entry, dtype=bool)
    for c in instance.carriers:
        for lane in c.contract_lanes:
            covered[lane // instance.n_exit] = True
    for i in np.flatnonzero(~covered):
        issues.append(f"entry hub {instance.entry_hubs[i]} has no contract lane")
    return issues
