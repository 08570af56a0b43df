import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from oracles import highs, vertex_oracle
from drayage_sddp.core import StructuralError
from drayage_sddp.lpsolve import (
    EQ, GE, LE, LinearProgram, LpBuilder, SolverError, Status, read_mps, solve_lp, to_mps,
)


def lp(c, A, senses, b, lower=None, upper=None):
    return LinearProgram(np.asarray(c, float), sp.csr_matrix(np.atleast_2d(np.asarray(A, float))),
                         senses, np.asarray(b, float), lower, upper)


def random_lp(seed: int, m: int, n: int, density: float = 0.6, feasible: bool = True) -> LinearProgram:
    """Feasible by construction (a known interior-ish point); bounded via upper bounds on negative costs."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n)) * (rng.random((m, n)) < density)
    upper = np.where(rng.random(n) < 0.5, rng.uniform(1, 10, n), np.inf)
    lower = np.where(rng.random(n) < 0.2, -rng.uniform(0, 3, n), 0.0)
    c = rng.normal(size=n)
    c[np.isinf(upper)] = np.abs(c[np.isinf(upper)]) + 0.1
    lower[np.isinf(upper)] = 0.0
    x0 = np.where(np.isfinite(upper), rng.uniform(lower, np.where(np.isfinite(upper), upper, 1.0)), rng.uniform(0, 5, n))
    senses = tuple(rng.choice([LE, GE, EQ], size=m, p=[0.45, 0.35, 0.2]))
    act = A @ x0
    slack = rng.uniform(0, 2, m) * (rng.random(m) < 0.7)
    b = np.array([a + s if sn == LE else a - s if sn == GE else a for a, s, sn in zip(act, slack, senses)])
    if not feasible:
        # x >= 0 columns cannot make a nonnegative row sum negative
        A = np.vstack([A, np.abs(rng.normal(size=n)) + 0.1])
        senses = senses + (LE,)
        b = np.append(b, -1.0)
        lower = np.zeros(n)
    return lp(c, A, senses, b, lower, upper)


def assert_kkt(prog: LinearProgram, sol, tol=1e-6):
    x, y, d = sol.primal, sol.duals, sol.reduced_costs
    act = prog.row_activity(x)
    scale = 1 + np.abs(prog.rhs)
    for s, a, r, yi, sc in zip(prog.senses, act, prog.rhs, y, scale):
        if s == LE:
            assert a <= r + tol * sc and yi <= tol
        elif s == GE:
            assert a >= r - tol * sc and yi >= -tol
        else:
            assert abs(a - r) <= tol * sc
        assert abs(yi * (r - a)) <= tol * sc
    assert np.all(x >= prog.lower - tol) and np.all(x <= prog.upper + tol)
    free = (x > prog.lower + 1e-7) & (x < prog.upper - 1e-7)
    assert np.all(np.abs(d[free]) <= tol * (1 + np.abs(prog.objective[free])))
    at_lower = np.isclose(x, prog.lower, atol=1e-7) & ~np.isclose(x, prog.upper, atol=1e-7)
    assert np.all(d[at_lower] >= -tol * (1 + np.abs(prog.objective[at_lower])))
    assert sol.dual_objective == pytest.approx(sol.objective, rel=1e-7, abs=1e-6)


# --- examples ------------------------------------------------------------------

def test_single_variable_bound():
    sol = solve_lp(lp([1.0], [[1.0]], (GE,), [1.0]))
    assert sol.status is Status.OPTIMAL
    assert sol.primal[0] == pytest.approx(1.0) and sol.objective == pytest.approx(1.0)
    assert sol.duals[0] == pytest.approx(1.0)


def test_contradictory_bounds_infeasible():
    assert solve_lp(lp([0.0], [[1.0]], (LE,), [-1.0])).status is Status.INFEASIBLE


def test_two_variable_example_matches_vertex_enumeration():
    c, A, senses, b = [3, 5], [[1, 1], [1, 0], [0, 1]], (GE, LE, LE), [4, 3, 3]
    assert vertex_oracle(c, A, senses, b, [0, 0], [np.inf, np.inf]) == pytest.approx(14.0)
    sol = solve_lp(lp(c, A, senses, b))
    assert sol.objective == pytest.approx(14.0)
    np.testing.assert_allclose(sol.primal, [3.0, 1.0], atol=1e-9)


def test_unbounded():
    sol = solve_lp(lp([-1.0, 0.0], [[1.0, -1.0]], (LE,), [1.0]))
    assert sol.status is Status.UNBOUNDED


def test_inverted_bounds_infeasible():
    assert solve_lp(lp([1.0], [[1.0]], (LE,), [5.0], [2.0], [1.0])).status is Status.INFEASIBLE


def test_beale_cycling_example():
    # classic LP on which textbook Dantzig pivoting cycles
    c = [-0.75, 150, -0.02, 6]
    A = [[0.25, -60, -0.04, 9], [0.5, -90, -0.02, 3], [0, 0, 1, 0]]
    prog = lp(c, A, (LE, LE, LE), [0, 0, 1])
    sol = solve_lp(prog)
    assert sol.status is Status.OPTIMAL
    assert highs(prog)["objective"] == pytest.approx(-0.05, abs=1e-9)
    assert sol.objective == pytest.approx(-0.05, abs=1e-9)


def test_noise_coefficients_do_not_drive_pivots():
    # tiny coefficients next to real ones must not produce huge primal values
    A = np.array([[1.0, 1e-15, 0.0], [1e-14, 1.0, 1.0], [0.0, 1.0, -1.0]])
    prog = lp([1.0, 2.0, 3.0], A, (GE, GE, EQ), [4.0, 2.0, 0.0])
    sol = solve_lp(prog)
    ref = highs(prog)
    assert sol.objective == pytest.approx(ref["objective"], rel=1e-9)
    assert np.abs(sol.primal).max() < 10


def test_badly_scaled_rows():
    prog = random_lp(5, 8, 10)
    scale = np.array([1e-4, 1e4, 1, 1e3, 1e-3, 1, 10, 0.1])
    scaled = LinearProgram(prog.objective, sp.diags(scale) @ prog.matrix, prog.senses, prog.rhs * scale,
                           prog.lower, prog.upper)
    assert solve_lp(scaled).objective == pytest.approx(highs(prog)["objective"], rel=1e-7, abs=1e-7)


def test_pivot_budget_raises_solver_error():
    prog = random_lp(3, 12, 15)
    with pytest.raises(SolverError, match="pivot budget"):
        solve_lp(prog, max_iter=1)


def test_structural_validation():
    with pytest.raises(StructuralError):
        lp([1.0, 2.0], [[1.0]], (LE,), [1.0])
    with pytest.raises(StructuralError):
        lp([1.0], [[1.0]], ("<",), [1.0])
    with pytest.raises(StructuralError):
        lp([1.0], [[np.nan]], (LE,), [1.0])
    with pytest.raises(StructuralError):
        lp([1.0], [[1.0]], (LE,), [1.0], lower=[-np.inf])


def test_builder_names_and_rows():
    b = LpBuilder()
    x = b.add_var("x", cost=2.0, upper=4.0)
    y = b.add_var("y", cost=1.0)
    b.add_row("cover", {x: 1.0, y: 1.0}, GE, 3.0)
    b.add_row("tie", [(x, 1.0), (y, -2.0)], EQ, 0.0)
    prog = b.build()
    assert prog.col_names == ["x", "y"] and prog.row_names == ["cover", "tie"]
    sol = solve_lp(prog)
    np.testing.assert_allclose(sol.primal, [2.0, 1.0], atol=1e-9)


# --- properties -----------------------------------------------------------------

lp_shapes = st.tuples(st.integers(0, 10**6), st.integers(1, 12), st.integers(1, 14))


@settings(max_examples=150, deadline=None)
@given(lp_shapes)
def test_matches_highs_on_random_feasible_lps(shape):
    prog = random_lp(*shape)
    sol, ref = solve_lp(prog), highs(prog)
    assert ref["status"] == "optimal"
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(ref["objective"], rel=1e-7, abs=1e-7)
    assert_kkt(prog, sol)


@settings(max_examples=60, deadline=None)
@given(lp_shapes)
def test_detects_infeasibility(shape):
    prog = random_lp(*shape, feasible=False)
    assert highs(prog)["status"] == "infeasible"
    assert solve_lp(prog).status is Status.INFEASIBLE


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4))
def test_small_lps_match_vertex_enumeration(seed, m):
    rng = np.random.default_rng(seed)
    n = 2 if m < 3 else 3
    A = rng.integers(-3, 4, size=(m, n)).astype(float)
    senses = tuple(rng.choice([LE, GE, EQ], size=m, p=[0.5, 0.4, 0.1]))
    b = rng.integers(-2, 8, size=m).astype(float)
    c = rng.integers(-5, 6, size=n).astype(float)
    upper = rng.integers(1, 6, size=n).astype(float)
    expected = vertex_oracle(c, A, senses, b, np.zeros(n), upper)
    sol = solve_lp(lp(c, A, senses, b, None, upper))
    if expected is None:
        assert sol.status is Status.INFEASIBLE
    else:
        assert sol.status is Status.OPTIMAL
        assert sol.objective == pytest.approx(expected, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(lp_shapes)
def test_deterministic_resolve(shape):
    prog = random_lp(*shape)
    a, b = solve_lp(prog), solve_lp(prog)
    assert a.objective == b.objective
    assert np.array_equal(a.primal, b.primal) and np.array_equal(a.duals, b.duals)


@settings(max_examples=40, deadline=None)
@given(lp_shapes)
def test_mps_round_trip(shape):
    prog = random_lp(*shape)
    back = read_mps(to_mps(prog))
    np.testing.assert_array_equal(back.objective, prog.objective)
    np.testing.assert_array_equal(back.matrix.toarray(), prog.matrix.toarray())
    np.testing.assert_array_equal(back.rhs, prog.rhs)
    np.testing.assert_array_equal(back.lower, prog.lower)
    np.testing.assert_array_equal(back.upper, prog.upper)
    assert back.senses == prog.senses
    assert solve_lp(back).objective == solve_lp(prog).objective


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10**6), st.integers(2, 5), st.integers(2, 5))
def test_transportation_lps(seed, n_src, n_dst):
    """Balanced transportation problems are highly degenerate."""
    rng = np.random.default_rng(seed)
    supply = rng.integers(1, 20, n_src).astype(float)
    demand = np.full(n_dst, supply.sum() / n_dst)
    cost = rng.integers(1, 10, (n_src, n_dst)).astype(float)
    A = np.vstack([np.kron(np.eye(n_src), np.ones(n_dst)), np.kron(np.ones(n_src), np.eye(n_dst))])
    prog = lp(cost.ravel(), A, (LE,) * n_src + (EQ,) * n_dst, np.concatenate([supply, demand]))
    sol = solve_lp(prog)
    assert sol.objective == pytest.approx(highs(prog)["objective"], rel=1e-9)
    assert_kkt(prog, sol)
