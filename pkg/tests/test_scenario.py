import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import correlation_oracle, poisson_gof_pvalue
from drayage_sddp.core import ValidationError
from drayage_sddp.instancegen import PracticalSpec, gen_practical_instance
from drayage_sddp.scenario import (
    CopulaSpec, FlowModel, IntensityModel, RandomStream, build_lattice, intensity_step, lattice_paths,
    panel_table, poisson_count_from_uniforms, sample_copula_uniforms, sample_flow_counts, sample_flows,
    sample_spot_rates, simulate_scenario, simulate_scenarios,
)


def uniform_counts(lam, n, seed):
    rng = np.random.default_rng(seed)
    return sample_flow_counts([lam], CopulaSpec.identity(1), rng, n)[:, 0]


# --- intensity recursion ---------------------------------------------------------

def test_intensity_step_examples():
    assert intensity_step(7.0, 123.0, None, 2000.0, 0.0, 0.0) == 2000.0
    assert intensity_step(0.0, 0.0, None, 3.5, 0.0, 0.0) == 3.5
    assert intensity_step(2.0, 4.0, None, 1.0, 0.5, 0.3) == pytest.approx(3.2)
    assert intensity_step(2.0, 4.0, [1.0, 2.0], 1.0, 0.5, 0.3, [0.1, 0.2]) == pytest.approx(3.7)


def test_intensity_model_validation():
    with pytest.raises(ValidationError, match="sum below 1"):
        IntensityModel([1.0], [0.6], [0.4])
    with pytest.raises(ValidationError, match="positive"):
        IntensityModel([0.0], [0.0], [0.0])
    m = IntensityModel([1.0, 2.0], 0.5, 0.3)
    np.testing.assert_allclose(m.stationary(1), [5.0, 10.0])


# --- copula -------------------------------------------------------------------------

def test_identity_copula_is_uncorrelated():
    u = sample_copula_uniforms(CopulaSpec.identity(4), RandomStream(1), size=10_000)
    corr = np.corrcoef(u.T)
    assert np.all(np.abs(corr[np.triu_indices(4, 1)]) < 0.03)


def test_comonotone_copula():
    u = sample_copula_uniforms(CopulaSpec(np.ones((2, 2))), RandomStream(2), size=1000)
    assert np.array_equal(u[:, 0], u[:, 1])


def test_scaled_variance_keeps_uniform_marginal():
    u = sample_copula_uniforms(CopulaSpec(np.diag([9.0, 0.25])), RandomStream(3), size=20_000)
    for d in range(2):
        assert stats.kstest(u[:, d], "uniform").pvalue > 0.001
    assert np.all((u > 0) & (u < 1))


def test_non_psd_covariance_rejected():
    with pytest.raises(ValidationError, match="semidefinite"):
        CopulaSpec([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValidationError, match="symmetric"):
        CopulaSpec([[1.0, 0.5], [0.4, 1.0]])


# --- counts --------------------------------------------------------------------------

def test_count_examples():
    assert poisson_count_from_uniforms(0.0, iter(())) == 0
    assert poisson_count_from_uniforms(1.0, [0.5] * 10) == 1
    with pytest.raises(ValidationError, match="outside"):
        poisson_count_from_uniforms(1.0, [0.5, 1.0])


def test_large_rate_moments():
    counts = uniform_counts(2000.0, 10_000, seed=11)
    assert abs(counts.mean() - 2000.0) <= 1.35
    assert 0.95 <= counts.var(ddof=1) / counts.mean() <= 1.05


@pytest.mark.parametrize("lam", [1.0, 5.0, 2000.0])
def test_chi_square_against_poisson_pmf(lam):
    assert poisson_gof_pvalue(uniform_counts(lam, 10_000, seed=int(lam) + 5), lam) > 0.001


def test_scalar_and_vector_counting_agree():
    rng = np.random.default_rng(4)
    u = rng.random(200)
    u[u == 0] = 0.5
    from drayage_sddp.scenario import counts_from_uniform_terms
    vec, crossed = counts_from_uniform_terms(np.array([7.0]), u.reshape(1, -1, 1))
    assert crossed and vec[0, 0] == poisson_count_from_uniforms(7.0, u)


def test_copula_keeps_poisson_marginals():
    copula = CopulaSpec.equicorrelated(3, 0.6)
    counts = sample_flow_counts([5.0, 5.0, 5.0], copula, np.random.default_rng(8), 10_000)
    for d in range(3):
        assert poisson_gof_pvalue(counts[:, d], 5.0) > 0.001


def test_independent_counts_are_uncorrelated():
    counts = sample_flow_counts([2000.0] * 2, CopulaSpec.identity(2), np.random.default_rng(9), 5000)
    assert abs(np.corrcoef(counts.T)[0, 1]) < 0.03


def test_correlated_counts_match_oracle():
    ref = correlation_oracle(0.5)
    counts = sample_flow_counts([2000.0] * 2, CopulaSpec.equicorrelated(2, 0.5), np.random.default_rng(10), 10_000)
    assert abs(np.corrcoef(counts.T)[0, 1] - ref) <= 0.05


def test_zero_rate_dimension_stays_zero():
    inflow, outflow = sample_flows(1, [0.0, 4.0, 3.0, 0.0], CopulaSpec.identity(4), RandomStream(5))
    assert inflow[0] == 0 and outflow[1] == 0
    counts = sample_flow_counts([0.0, 3.0], CopulaSpec.identity(2), np.random.default_rng(1), 500)
    assert np.all(counts[:, 0] == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.sampled_from(["flows", 3, "x", 0]), max_size=4))
def test_streams_are_reproducible(seed, path):
    s = RandomStream(seed, tuple(path))
    a = sample_flow_counts([4.0, 9.0], CopulaSpec.equicorrelated(2, 0.3), s.generator(), 20)
    b = sample_flow_counts([4.0, 9.0], CopulaSpec.equicorrelated(2, 0.3), s.generator(), 20)
    assert np.array_equal(a, b)
    other = RandomStream(seed, tuple(path) + ("other",)).generator().random(4)
    assert not np.array_equal(s.generator().random(4), other)


# --- spot rates and lattices -------------------------------------------------------

@pytest.fixture(scope="module")
def downsized():
    return gen_practical_instance(PracticalSpec.downsized(), RandomStream(11))


def test_spot_rate_examples(downsized):
    assert np.all(sample_spot_rates(downsized, 1, RandomStream(1), 5.0, 5.0) == 5.0)
    rng = np.random.default_rng(3)
    draws = np.concatenate([sample_spot_rates(downsized, 1, rng, 3.0, 9.0).ravel() for _ in range(200)])
    assert draws.size >= 10_000
    assert abs(draws[:10_000].mean() - 6.0) <= 0.05
    a = sample_spot_rates(downsized, 2, RandomStream(4, ("spot", 2)), 3.0, 9.0)
    b = sample_spot_rates(downsized, 2, RandomStream(4, ("spot", 2)), 3.0, 9.0)
    assert np.array_equal(a, b)
    with pytest.raises(ValidationError):
        sample_spot_rates(downsized, 1, RandomStream(1), 9.0, 3.0)


def test_default_lattice_shape():
    inst = gen_practical_instance(PracticalSpec(), RandomStream(7))
    lattice = build_lattice(inst, FlowModel.constant(inst, rho=0.3), None, 20, RandomStream(8))
    assert lattice.horizon == 12
    assert all(lattice.size(t) == 20 for t in range(1, 13))
    for t in range(1, 13):
        assert lattice.probs(t).sum() == pytest.approx(1.0, abs=1e-12)


def test_single_realization_lattice_is_deterministic(downsized):
    model = FlowModel.constant(downsized)
    lattice = build_lattice(downsized, model, (5.0, 5.0), 1, RandomStream(1))
    paths = list(lattice_paths(lattice))
    assert len(paths) == 1 and paths[0][0] == 1.0
    assert np.all(paths[0][1][0].spot_rate == 5.0)


def test_lattice_paths_enumerate_product(downsized):
    small = build_lattice(downsized, FlowModel.constant(downsized), None, 2, RandomStream(1))
    three = gen_practical_instance(PracticalSpec.downsized(periods=3), RandomStream(11))
    lat = build_lattice(three, FlowModel.constant(three), None, 2, RandomStream(1))
    paths = list(lattice_paths(lat))
    assert len(paths) == 8 and sum(p for p, _ in paths) == pytest.approx(1.0)
    assert small.digest() != lat.digest()


def test_autoregressive_simulation_is_reproducible(downsized):
    model = FlowModel(IntensityModel(np.full(6, 600.0), 0.3, 0.2), CopulaSpec.equicorrelated(6, 0.3))
    a = simulate_scenario(downsized, model, None, RandomStream(3, ("oob", 1)))
    b = simulate_scenario(downsized, model, None, RandomStream(3, ("oob", 1)))
    assert len(a) == 12
    assert all(np.array_equal(x.inflow, y.inflow) and np.array_equal(x.spot_rate, y.spot_rate) for x, y in zip(a, b))
    many = simulate_scenarios(downsized, model, None, 3, RandomStream(3))
    assert not np.array_equal(many[0][0].inflow, many[1][0].inflow)
    mean_flow = np.mean([xi.inflow.mean() for s in simulate_scenarios(downsized, model, None, 20, RandomStream(4)) for xi in s])
    assert mean_flow == pytest.approx(1200.0, rel=0.05)


def test_panel_table(downsized):
    path = simulate_scenario(downsized, FlowModel.constant(downsized), None, RandomStream(1))
    text = panel_table(path, downsized)
    header, *rows = text.strip().splitlines()
    assert header.split(",")[:3] == ["stage", "dimension", "value"]
    assert len(rows) == 12 * (6 + downsized.n_carriers * downsized.n_lanes)
