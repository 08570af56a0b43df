"""Linear programs and a bundled bounded-variable revised simplex solver.

The solver works on ``min c'x  s.t.  A x (<=, ==, >=) b,  l <= x <= u`` with
finite lower bounds.  Each row receives a logical (slack) column, rows whose
slack cannot start feasibly receive an artificial column, and a two-phase
primal simplex runs on the explicit basis inverse with periodic
refactorisation.  Row duals follow the usual minimisation convention: the
dual of a ``<=`` row is nonpositive, that of a ``>=`` row nonnegative.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import DrayageError, StructuralError

LE, EQ, GE = "<=", "==", ">="

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-9
PIVOT_REL = 1e-7
DEGENERATE_LIMIT = 50
REFACTOR_EVERY = 64


class SolverError(DrayageError):
    """The simplex method broke down (pivot budget, singular basis)."""


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass
class LinearProgram:
    objective: np.ndarray
    matrix: sp.csr_matrix
    senses: tuple
    rhs: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    row_names: list | None = None
    col_names: list | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.matrix = sp.csr_matrix(self.matrix, dtype=float)
        m, n = self.matrix.shape
        self.senses = tuple(self.senses)
        if self.objective.shape != (n,):
            raise StructuralError(f"objective has {self.objective.size} entries for {n} columns")
        if self.rhs.shape != (m,) or len(self.senses) != m:
            raise StructuralError(f"rhs/senses must have {m} entries")
        if any(s not in (LE, EQ, GE) for s in self.senses):
            raise StructuralError(f"unknown row sense in {set(self.senses)}")
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise StructuralError("bound vectors do not match the column count")
        if not np.all(np.isfinite(self.lower)):
            raise StructuralError("lower bounds must be finite")
        for arr, name in ((self.objective, "objective"), (self.rhs, "rhs"), (self.matrix.data, "matrix")):
            if not np.all(np.isfinite(arr)):
                raise StructuralError(f"{name} has non-finite coefficients")
        self.row_names = list(self.row_names) if self.row_names is not None else [f"R{i}" for i in range(m)]
        self.col_names = list(self.col_names) if self.col_names is not None else [f"C{j}" for j in range(n)]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def row_activity(self, x) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=float)


@dataclass
class LpSolution:
    status: Status
    primal: np.ndarray
    objective: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int = 0
    dual_objective: float = float("nan")

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


class LpBuilder:
    """Incremental construction of a :class:`LinearProgram` with named rows and columns."""

    def __init__(self):
        self._cost: list[float] = []
        self._lower: list[float] = []
        self._upper: list[float] = []
        self._cols: list[str] = []
        self._rows: list[str] = []
        self._senses: list[str] = []
        self._rhs: list[float] = []
        self._ri: list[int] = []
        self._ci: list[int] = []
        self._val: list[float] = []

    @property
    def n_cols(self) -> int:
        return len(self._cols)

    @property
    def n_rows(self) -> int:
        return len(self._rows)

    def add_var(self, name: str, cost: float = 0.0, lower: float = 0.0, upper: float = np.inf) -> int:
        self._cols.append(name)
        self._cost.append(float(cost))
        self._lower.append(float(lower))
        self._upper.append(float(upper))
        return len(self._cols) - 1

    def add_row(self, name: str, coefs: dict | list, sense: str, rhs: float) -> int:
        row = len(self._rows)
        items = coefs.items() if isinstance(coefs, dict) else coefs
        for col, val in items:
            if val != 0.0:
                self._ri.append(row)
                self._ci.append(col)
                self._val.append(float(val))
        self._rows.append(name)
        self._senses.append(sense)
        self._rhs.append(float(rhs))
        return row

    def build(self) -> LinearProgram:
        matrix = sp.coo_matrix(
            (self._val, (self._ri, self._ci)), shape=(len(self._rows), len(self._cols))
        ).tocsr()
        return LinearProgram(
            np.array(self._cost), matrix, tuple(self._senses), np.array(self._rhs),
            np.array(self._lower), np.array(self._upper), list(self._rows), list(self._cols),
        )


DENSE_LIMIT = 4_000_000
CRASH_REL = 0.1


def _crash(lp: LinearProgram, sign: np.ndarray, slack_upper: np.ndarray):
    """Triangular crash: make structurals basic in rows whose slack starts infeasible.

    Rows are visited from the largest violation down.  A column may enter for
    row ``i`` when its coefficient is not small relative to the row, when moving it up from its lower bound makes row ``i`` tight,
    keeps it within its bounds, leaves every currently feasible row feasible
    and does not touch a row already claimed by another crashed column.  The
    claimed columns form a triangular block, so the starting basis is
    nonsingular.
    """
    m, n = lp.shape
    x = lp.lower.copy()
    act = lp.matrix @ x
    csr, csc = lp.matrix, lp.matrix.tocsc()
    rhs = lp.rhs.tolist()
    tol = (FEAS_TOL * (1.0 + np.abs(lp.rhs))).tolist()
    sg, su, upper = sign.tolist(), slack_upper.tolist(), lp.upper.tolist()
    r_ptr, r_idx, r_val = csr.indptr.tolist(), csr.indices.tolist(), csr.data.tolist()
    c_ptr, c_idx, c_val = csc.indptr.tolist(), csc.indices.tolist(), csc.data.tolist()
    a = act.tolist()
    xs = x.tolist()

    def slack_ok(i, activity):
        sv = sg[i] * (rhs[i] - activity)
        return -tol[i] <= sv <= su[i] + tol[i]

    claimed = [False] * m
    used = [False] * n
    owner = np.full(m, -1)
    pending = [i for i in range(m) if not slack_ok(i, a[i])]
    pending.sort(key=lambda r: (-abs(rhs[r] - a[r]), r))
    for i in pending:
        if slack_ok(i, a[i]):
            continue
        lo, hi = r_ptr[i], r_ptr[i + 1]
        if lo == hi:
            continue
        big = CRASH_REL * max(abs(v) for v in r_val[lo:hi])
        for k in range(lo, hi):
            j = r_idx[k]
            if used[j] or abs(r_val[k]) < big:
                continue
            delta = (rhs[i] - a[i]) / r_val[k]
            if delta <= 0.0 or xs[j] + delta > upper[j]:
                continue
            fine = True
            for kk in range(c_ptr[j], c_ptr[j + 1]):
                row = c_idx[kk]
                if claimed[row]:
                    fine = False
                    break
                if row != i and slack_ok(row, a[row]) and not slack_ok(row, a[row] + c_val[kk] * delta):
                    fine = False
                    break
            if not fine:
                continue
            xs[j] += delta
            for kk in range(c_ptr[j], c_ptr[j + 1]):
                a[c_idx[kk]] += c_val[kk] * delta
            a[i] = rhs[i]
            used[j] = True
            claimed[i] = True
            owner[i] = j
            break
    return np.array(xs), np.array(a), owner


class _Simplex:
    # Column layout: structurals 0..n-1, slacks n..n+m-1, artificials after.

    def __init__(self, lp: LinearProgram, max_iter: int | None):
        m, n = lp.shape
        self.m, self.n = m, n
        sign = np.array([-1.0 if s == GE else 1.0 for s in lp.senses])
        slack_upper = np.array([0.0 if s == EQ else np.inf for s in lp.senses])
        x_struct, act, owner = _crash(lp, sign, slack_upper)
        crashed = owner >= 0
        resid = lp.rhs - act
        slack_val = sign * resid
        scale = 1.0 + np.abs(lp.rhs)
        ok = (slack_val >= -FEAS_TOL * scale) & (slack_val <= slack_upper + FEAS_TOL * scale)
        ok |= crashed
        art_rows = np.flatnonzero(~ok)
        n_art = art_rows.size
        art_sign = np.sign(resid[art_rows])
        art_sign[art_sign == 0] = 1.0

        A = lp.matrix.tocsc()
        S = sp.csc_matrix((sign, (np.arange(m), np.arange(m))), shape=(m, m))
        R = sp.csc_matrix((art_sign, (art_rows, np.arange(n_art))), shape=(m, n_art))
        self.A = sp.hstack([A, S, R], format="csc")
        total = n + m + n_art
        self.total = total
        self.dense = self.A.toarray() if m * total <= DENSE_LIMIT else None
        self.AT = self.dense.T if self.dense is not None else self.A.T.tocsr()
        self.lower = np.concatenate([lp.lower, np.zeros(m), np.zeros(n_art)])
        self.upper = np.concatenate([lp.upper, slack_upper, np.full(n_art, np.inf)])
        self.cost = np.concatenate([lp.objective, np.zeros(m + n_art)])
        self.b = lp.rhs
        self.n_art = n_art
        self.art_start = n + m

        self.x = self.lower.copy()
        self.x[:n] = x_struct
        basis = np.arange(n, n + m)
        basis[crashed] = owner[crashed]
        basis[art_rows] = self.art_start + np.arange(n_art)
        self.basis = basis
        self.x[n:n + m] = np.where(ok & ~crashed, np.clip(slack_val, 0.0, slack_upper), 0.0)
        self.x[self.art_start:] = np.abs(resid[art_rows])
        self.is_basic = np.zeros(total, dtype=bool)
        self.is_basic[basis] = True
        self.iterations = 0
        if crashed.any():
            self.refactor()
        else:
            # slack/artificial basis is diagonal with entries +-1
            diag = np.where(basis < self.art_start, sign, 0.0)
            diag[art_rows] = art_sign
            self.Binv = np.diag(1.0 / diag) if m else np.zeros((0, 0))
            self.since_refactor = 0
        self.max_iter = max_iter if max_iter is not None else 50 * (m + total) + 1000
        cscale = np.max(np.abs(lp.objective)) if n else 0.0
        self.opt_tol = OPT_TOL * max(1.0, cscale)
        self.feas_scale = 1.0 + np.max(np.abs(lp.rhs)) if m else 1.0
        self.harris_tol = FEAS_TOL * self.feas_scale

    def refactor(self):
        if self.dense is not None:
            B = self.dense[:, self.basis]
        else:
            B = self.A[:, self.basis].toarray()
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular basis after {getattr(self, 'iterations', 0)} pivots") from exc
        xn = np.where(self.is_basic, 0.0, self.x)
        resid = self.b - (self.dense @ xn if self.dense is not None else self.A @ xn)
        self.x[self.basis] = self.Binv @ resid
        self.since_refactor = 0

    def column(self, j: int) -> np.ndarray:
        start, end = self.A.indptr[j], self.A.indptr[j + 1]
        return self.Binv[:, self.A.indices[start:end]] @ self.A.data[start:end]

    def run(self, cost: np.ndarray, allowed: np.ndarray) -> str:
        """Iterate to optimality for ``cost``; returns 'optimal' or 'unbounded'."""
        degenerate_run = 0
        bland = False
        fixed = self.upper - self.lower <= 0.0
        blocked = ~allowed | fixed
        finite_up = np.isfinite(self.upper)
        upper_edge = np.where(finite_up, self.upper - FEAS_TOL * (1.0 + np.abs(np.where(finite_up, self.upper, 0.0))), np.inf)
        while True:
            if self.iterations >= self.max_iter:
                raise SolverError(
                    f"pivot budget of {self.max_iter} exhausted (rows={self.m}, cols={self.total}, "
                    f"bland={bland}, degenerate run={degenerate_run})"
                )
            y = cost[self.basis] @ self.Binv
            d = cost - self.AT @ y
            at_upper = self.x >= upper_edge
            gain = np.where(at_upper, d, -d)
            gain[self.is_basic] = 0.0
            gain[blocked] = 0.0
            candidates = np.flatnonzero(gain > self.opt_tol)
            if candidates.size == 0:
                self.y, self.d = y, d
                return "optimal"
            q = int(candidates[0]) if bland else int(candidates[np.argmax(gain[candidates])])
            direction = -1.0 if at_upper[q] else 1.0
            alpha = self.column(q)
            step, leave = self._ratio_test(q, alpha, direction, bland)
            if step == np.inf:
                self.y, self.d = y, d
                return "unbounded"
            self.iterations += 1
            if step <= FEAS_TOL:
                degenerate_run += 1
                if degenerate_run > DEGENERATE_LIMIT:
                    bland = True
            else:
                degenerate_run = 0
                bland = False
            self.x[self.basis] -= step * direction * alpha
            self.x[q] += step * direction
            if leave is None:
                continue  # bound flip
            r, leave_to_upper = leave
            out = self.basis[r]
            self.x[out] = self.upper[out] if leave_to_upper else self.lower[out]
            self.basis[r] = q
            self.is_basic[out] = False
            self.is_basic[q] = True
            self._update_inverse(r, alpha)

    def _ratio_test(self, q, alpha, direction, bland):
        # Harris two-pass test: bounds are relaxed by a small tolerance to find
        # the longest admissible step, then the largest pivot within it wins.
        flip = self.upper[q] - self.lower[q]
        if not self.m:
            return flip, None
        delta = direction * alpha  # basic values move by -step*delta
        mag = np.abs(delta)
        ptol = max(PIVOT_TOL, PIVOT_REL * mag.max())
        basis = self.basis
        xb = self.x[basis]
        down = delta > 0
        target = np.where(down, self.lower[basis], self.upper[basis])
        gap = np.maximum(np.where(down, xb - target, target - xb), 0.0)
        gap = np.where(mag > ptol, gap, np.inf)
        mag = np.maximum(mag, ptol)
        steps = gap / mag
        if bland:
            best = steps.min()
            if flip <= best:
                return flip, None
            if best == np.inf:
                return np.inf, None
            ties = np.flatnonzero(steps <= best + FEAS_TOL)
            r = int(ties[np.argmin(basis[ties])])
        else:
            bound = ((gap + self.harris_tol) / mag).min()
            if flip <= bound:
                return flip, None
            if bound == np.inf:
                return np.inf, None
            ties = np.flatnonzero(steps <= bound)
            r = int(ties[np.argmax(mag[ties])])
        return steps[r], (r, not down[r])

    def _update_inverse(self, r, alpha):
        pivot = alpha[r]
        if abs(pivot) < 1e-12:
            raise SolverError(f"pivot element {pivot:.3e} too small at iteration {self.iterations}")
        row = self.Binv[r] / pivot
        self.Binv -= np.outer(alpha, row)
        self.Binv[r] = row
        self.since_refactor += 1
        if self.since_refactor >= REFACTOR_EVERY or abs(pivot) < 1e-6 * np.abs(alpha).max():
            self.refactor()

    def drive_out_artificials(self):
        real = np.ones(self.total, dtype=bool)
        real[self.art_start:] = False
        for r in range(self.m):
            if self.basis[r] < self.art_start:
                continue
            row = self.AT @ self.Binv[r]
            cand = np.flatnonzero(real & ~self.is_basic & (np.abs(row) > 1e-7))
            if cand.size == 0:
                continue  # redundant row; artificial stays basic at zero
            q = int(cand[0])
            alpha = self.column(q)
            out = self.basis[r]
            self.x[out] = 0.0
            self.basis[r] = q
            self.is_basic[out] = False
            self.is_basic[q] = True
            self._update_inverse(r, alpha)
        self.upper[self.art_start:] = 0.0
        self.refactor()


def solve_lp(program: LinearProgram, max_iter: int | None = None) -> LpSolution:
    """Solve ``program`` with the bundled two-phase revised simplex method."""
    m, n = program.shape
    if np.any(program.lower > program.upper):
        return LpSolution(Status.INFEASIBLE, program.lower.copy(), np.nan, np.zeros(m), np.zeros(n))
    smp = _Simplex(program, max_iter)
    allowed = np.ones(smp.total, dtype=bool)
    if smp.n_art:
        phase1 = np.zeros(smp.total)
        phase1[smp.art_start:] = 1.0
        smp.run(phase1, allowed)
        smp.refactor()
        infeas = float(smp.x[smp.art_start:].sum())
        if infeas > FEAS_TOL * smp.feas_scale * max(1, smp.n_art):
            return LpSolution(Status.INFEASIBLE, smp.x[:n].copy(), np.nan, np.zeros(m), np.zeros(n), smp.iterations)
        smp.drive_out_artificials()
    allowed[smp.art_start:] = False
    outcome = smp.run(smp.cost, allowed)
    smp.refactor()
    x = np.clip(smp.x[:n], program.lower, program.upper)
    if outcome == "unbounded":
        return LpSolution(Status.UNBOUNDED, x, -np.inf, np.zeros(m), np.zeros(n), smp.iterations)
    # recompute duals on the fresh factorisation
    y = smp.cost[smp.basis] @ smp.Binv
    d = program.objective - program.matrix.T @ y
    d[smp.is_basic[:n]] = 0.0
    obj = float(program.objective @ x)
    dual_obj = float(program.rhs @ y + d @ x)
    return LpSolution(Status.OPTIMAL, x, obj, y, d, smp.iterations, dual_obj)


def to_mps(program: LinearProgram, name: str = "STAGE") -> str:
    """Fixed-column MPS text; long row/column labels are listed in ``*`` comments."""
    m, n = program.shape
    rnames = [f"R{i:07d}" for i in range(m)]
    cnames = [f"C{j:07d}" for j in range(n)]
    out = io.StringIO()
    out.write("* fixed-format MPS written by drayage_sddp\n")
    for short, long in zip(rnames, program.row_names):
        out.write(f"* ROW {short} {long}\n")
    for short, long in zip(cnames, program.col_names):
        out.write(f"* COL {short} {long}\n")
    out.write(f"NAME          {name[:8]}\n")
    out.write("ROWS\n")
    out.write(" N  COST\n")
    code = {LE: "L", EQ: "E", GE: "G"}
    for short, sense in zip(rnames, program.senses):
        out.write(f" {code[sense]}  {short}\n")
    out.write("COLUMNS\n")
    csc = program.matrix.tocsc()

    def entry(col, row, val):
        out.write(f"    {col:<8}  {row:<8}  {_num(val)}\n")

    for j in range(n):
        if program.objective[j] != 0.0 or csc.indptr[j] == csc.indptr[j + 1]:
            entry(cnames[j], "COST", program.objective[j])
        for k in range(csc.indptr[j], csc.indptr[j + 1]):
            entry(cnames[j], rnames[csc.indices[k]], csc.data[k])
    out.write("RHS\n")
    for i in range(m):
        if program.rhs[i] != 0.0:
            out.write(f"    {'RHS':<8}  {rnames[i]:<8}  {_num(program.rhs[i])}\n")
    out.write("BOUNDS\n")
    for j in range(n):
        lo, hi = program.lower[j], program.upper[j]
        if lo == hi:
            out.write(f" FX {'BND':<8}  {cnames[j]:<8}  {_num(lo)}\n")
            continue
        if lo != 0.0:
            out.write(f" LO {'BND':<8}  {cnames[j]:<8}  {_num(lo)}\n")
        if np.isfinite(hi):
            out.write(f" UP {'BND':<8}  {cnames[j]:<8}  {_num(hi)}\n")
    out.write("ENDATA\n")
    return out.getvalue()


def _num(val: float) -> str:
    text = repr(float(val))
    return f"{text:>12}"


def read_mps(text: str) -> LinearProgram:
    """Parse MPS text produced by :func:`to_mps` back into a program."""
    long_rows, long_cols = {}, {}
    section = None
    rows, senses = [], []
    cols: dict[str, int] = {}
    cost: dict[int, float] = {}
    entries = []
    rhs: dict[str, float] = {}
    bounds = []
    inv = {"L": LE, "E": EQ, "G": GE}
    for line in text.splitlines():
        if line.startswith("*"):
            parts = line.split()
            if len(parts) == 4 and parts[1] == "ROW":
                long_rows[parts[2]] = parts[3]
            elif len(parts) == 4 and parts[1] == "COL":
                long_cols[parts[2]] = parts[3]
            continue
        if not line.startswith(" "):
            section = line.split()[0]
            continue
        parts = line.split()
        if section == "ROWS":
            if parts[0] != "N":
                rows.append(parts[1])
                senses.append(inv[parts[0]])
        elif section == "COLUMNS":
            col, row, val = parts[0], parts[1], float(parts[2])
            j = cols.setdefault(col, len(cols))
            if row == "COST":
                cost[j] = val
            else:
                entries.append((row, j, val))
        elif section == "RHS":
            rhs[parts[1]] = float(parts[2])
        elif section == "BOUNDS":
            bounds.append((parts[0], parts[2], float(parts[3])))
    row_index = {r: i for i, r in enumerate(rows)}
    n = len(cols)
    lower, upper = np.zeros(n), np.full(n, np.inf)
    for kind, col, val in bounds:
        j = cols.setdefault(col, len(cols))
        if j >= n:
            lower, upper = np.append(lower, 0.0), np.append(upper, np.inf)
            n += 1
        if kind in ("LO", "FX"):
            lower[j] = val
        if kind in ("UP", "FX"):
            upper[j] = val
    c = np.zeros(n)
    for j, v in cost.items():
        c[j] = v
    matrix = sp.coo_matrix(
        ([v for _, _, v in entries], ([row_index[r] for r, _, _ in entries], [j for _, j, _ in entries])),
        shape=(len(rows), n),
    )
    b = np.array([rhs.get(r, 0.0) for r in rows])
    names = sorted(cols, key=cols.get)
    return LinearProgram(
        c, matrix, tuple(senses), b, lower, upper,
        [long_rows.get(r, r) for r in rows], [long_cols.get(col, col) for col in names],
    )
