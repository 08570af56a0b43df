"""Shared fixtures and the acceptance summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from drayage_sddp.core import Carrier, CostParams, Instance, StageRealization, SystemState
from drayage_sddp.instancegen import gen_small_instance
from drayage_sddp.scenario import RandomStream, ScenarioLattice

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


# --- instances ----------------------------------------------------------------

def one_lane_instance(contract_cap=10.0, spot_cap=40.0, rate=5.0, horizon=1, capacity=100.0) -> Instance:
    """One entry hub, one exit hub, one carrier with a contract on the single lane."""
    return Instance(
        entry_hubs=("E",), exit_hubs=("X",), horizon=horizon,
        carriers=(Carrier("c1", {0: rate}, (contract_cap,), (spot_cap,)),),
        cost=CostParams([20.0], [10.0], [30.0]),
        entry_capacity=[capacity], exit_capacity=[capacity],
        initial_state=SystemState.zeros(1, 1),
        spot_rate_range=(8.0, 8.0), flow_range=(15.0, 20.0), name="one-lane",
    )


def one_lane_realization(inflow=20.0, outflow=15.0, spot=8.0) -> StageRealization:
    return StageRealization([inflow], [outflow], [[spot]])


def deterministic_lattice(instance: Instance) -> ScenarioLattice:
    return ScenarioLattice([[xi] for xi in instance.nominal], [np.ones(1)] * instance.horizon)


def perturbed_lattice(instance: Instance, n: int, seed: int, flow_levels=(10, 15, 20, 25, 30)) -> ScenarioLattice:
    """Stage-wise independent lattice drawn around an instance's flow and spot ranges."""
    rng = np.random.default_rng(seed)
    lo, hi = instance.spot_rate_range
    stages = []
    for _t in range(instance.horizon):
        stages.append([
            StageRealization(
                rng.choice(flow_levels, size=instance.n_entry).astype(float),
                rng.choice(flow_levels, size=instance.n_exit).astype(float),
                rng.uniform(lo, hi, size=(instance.n_carriers, instance.n_lanes)),
            )
            for _ in range(n)
        ])
    return ScenarioLattice(stages, [np.full(n, 1.0 / n)] * instance.horizon)


@pytest.fixture(scope="session")
def small_instance() -> Instance:
    return gen_small_instance(RandomStream(1))


@pytest.fixture(scope="session")
def tiny_instance() -> Instance:
    """Three-stage version of the 2x2 instance."""
    return gen_small_instance(RandomStream(3), horizon=3)


@pytest.fixture(scope="session")
def tiny_lattice(tiny_instance) -> ScenarioLattice:
    return perturbed_lattice(tiny_instance, 3, seed=17)
