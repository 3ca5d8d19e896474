"""Solver-agnostic second-order cone programs.

A :class:`ConicProgram` collects bounded variables, linear equality and
inequality rows, second-order cones ``||A x + b||_2 <= c.x + d`` and a
linear plus diagonal-quadratic objective.  After :meth:`ConicProgram.freeze`
the constraint data is compiled once into sparse matrices; objectives can
then be swapped cheaply with :meth:`ConicProgram.with_objective`, which is
what the decomposition loop does on every iteration.

Backends receive the standard form::

    minimize    1/2 x'Px + q'x + r
    subject to  A x + s = b,   s in {0}^m0 x R+^m1 x SOC(d1) x ... x SOC(dk)
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "VariableHandle",
    "ConicProgram",
    "Solution",
    "StandardForm",
    "SolverBackend",
    "ClarabelBackend",
    "CvxoptBackend",
    "ProgramError",
    "add_variable",
    "add_soc",
    "solve",
    "soc_residual",
    "default_backend",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERIC_FAILURE = "numeric-failure"

EXACTNESS_TOL = 1e-5
RETRY_TOL = 1e-7


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class VariableHandle:
    index: int
    label: tuple


@dataclass(frozen=True)
class StandardForm:
    P: sp.csc_matrix
    q: np.ndarray
    r: float
    A: sp.csc_matrix
    b: np.ndarray
    n_zero: int
    n_nonneg: int
    soc_dims: tuple


@dataclass
class Solution:
    status: str
    x: np.ndarray | None
    objective: float
    solve_time: float
    message: str = ""
    program: "ConicProgram | None" = field(default=None, repr=False)

    @property
    def optimal(self):
        return self.status == OPTIMAL

    def value(self, key):
        """Primal value by label or handle."""
        return float(self.x[self.program.index(key)])


def _as_rows(mat, n_vars):
    """Normalise a cone/row block into a list of ``{col: coef}`` dicts."""
    if sp.issparse(mat):
        mat = sp.csr_matrix(mat)
        if mat.shape[1] > n_vars:
            if mat.nnz and mat.indices.max() >= n_vars:
                raise ProgramError("column index out of range")
        rows = []
        for i in range(mat.shape[0]):
            lo, hi = mat.indptr[i], mat.indptr[i + 1]
            rows.append(dict(zip(mat.indices[lo:hi].tolist(), mat.data[lo:hi].tolist())))
        return rows
    if isinstance(mat, np.ndarray):
        mat = np.atleast_2d(mat) if mat.size else mat.reshape(0, n_vars)
        if mat.shape[1] != n_vars:
            raise ProgramError(f"expected {n_vars} columns, got {mat.shape[1]}")
        return [{j: float(v) for j, v in enumerate(row) if v != 0.0} for row in mat]
    return [dict(row) for row in mat]


class ConicProgram:
    """Mutable builder, then frozen container, for a conic program."""

    def __init__(self, name="program"):
        self.name = name
        self._labels = {}
        self.lo = []
        self.hi = []
        # row storage: list of (dict, rhs)
        self.eqs = []
        self.ineqs = []
        # soc storage: list of (rows: list[dict], b: list, c: dict, d: float)
        self.socs = []
        self.tags = {"eq": [], "ineq": [], "soc": []}
        self._lin = {}
        self._quad = {}
        self.constant = 0.0
        self._frozen = None
        self._lin_arr = None
        self._quad_arr = None

    # -- construction -----------------------------------------------------

    @property
    def n_vars(self):
        return len(self.lo)

    @property
    def frozen(self):
        return self._frozen is not None

    def _check_mutable(self):
        if self._frozen is not None:
            raise ProgramError("program is frozen")

    def add_variable(self, label, lo=-math.inf, hi=math.inf):
        self._check_mutable()
        lo, hi = float(lo), float(hi)
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise ProgramError(f"inverted bounds for {label!r}: [{lo}, {hi}]")
        if label in self._labels:
            raise ProgramError(f"duplicate variable label {label!r}")
        idx = len(self.lo)
        self._labels[label] = idx
        self.lo.append(lo)
        self.hi.append(hi)
        return VariableHandle(idx, label)

    def index(self, key):
        if isinstance(key, VariableHandle):
            return key.index
        if isinstance(key, (int, np.integer)):
            return int(key)
        return self._labels[key]

    def handle(self, label):
        return VariableHandle(self._labels[label], label)

    def labels(self):
        out = [None] * self.n_vars
        for lab, i in self._labels.items():
            out[i] = lab
        return out

    def _row(self, coeffs):
        row = {}
        for k, v in dict(coeffs).items():
            i = self.index(k)
            if not 0 <= i < self.n_vars:
                raise ProgramError(f"column index {i} out of range (n_vars={self.n_vars})")
            row[i] = row.get(i, 0.0) + float(v)
        return row

    def add_eq(self, coeffs, rhs, tag=None):
        """Row ``a.x == rhs``; ``coeffs`` maps label/handle/index to coefficient."""
        self._check_mutable()
        self.eqs.append((self._row(coeffs), float(rhs)))
        self.tags["eq"].append(tag)
        return len(self.eqs) - 1

    def add_ineq(self, coeffs, rhs, tag=None):
        """Row ``a.x <= rhs``."""
        self._check_mutable()
        self.ineqs.append((self._row(coeffs), float(rhs)))
        self.tags["ineq"].append(tag)
        return len(self.ineqs) - 1

    def count(self, tag):
        """Number of rows and cones carrying ``tag``."""
        return sum(t == tag for group in self.tags.values() for t in group)

    def add_soc(self, A, b, c, d=0.0, tag=None):
        """Register ``||A x + b||_2 <= c.x + d`` and return its id."""
        self._check_mutable()
        rows = [self._row(r) for r in _as_rows(A, self.n_vars)]
        b = np.zeros(len(rows)) if b is None else np.asarray(b, dtype=float).ravel()
        if len(b) != len(rows):
            raise ProgramError(f"cone offset has length {len(b)}, expected {len(rows)}")
        if isinstance(c, np.ndarray):
            if c.shape != (self.n_vars,):
                raise ProgramError(f"cone vector has shape {c.shape}, expected ({self.n_vars},)")
            c = {j: v for j, v in enumerate(c) if v != 0.0}
        self.socs.append((rows, b.tolist(), self._row(c), float(d)))
        self.tags["soc"].append(tag)
        return len(self.socs) - 1

    def add_objective(self, coeffs=None, quadratic=None, constant=0.0):
        """Accumulate ``sum c_j x_j + sum q_j x_j^2 + constant`` into the objective."""
        self._check_mutable()
        for i, v in self._row(coeffs or {}).items():
            self._lin[i] = self._lin.get(i, 0.0) + v
        for i, v in self._row(quadratic or {}).items():
            if v < 0:
                raise ProgramError("quadratic objective coefficients must be non-negative")
            self._quad[i] = self._quad.get(i, 0.0) + v
        self.constant += float(constant)

    # -- frozen form ------------------------------------------------------

    def freeze(self):
        """Compile constraint data; further structural edits raise."""
        if self._frozen is not None:
            return self
        n = self.n_vars
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        fixed = np.flatnonzero(lo == hi)
        has_lo = np.flatnonzero(np.isfinite(lo) & (lo != hi))
        has_hi = np.flatnonzero(np.isfinite(hi) & (lo != hi))

        ri, ci, vals, rhs = [], [], [], []
        row = 0

        def emit(coeffs, b, sign=1.0):
            nonlocal row
            for j, v in coeffs.items():
                ri.append(row)
                ci.append(j)
                vals.append(sign * v)
            rhs.append(b)
            row += 1

        for coeffs, b in self.eqs:
            emit(coeffs, b)
        for j in fixed:
            emit({int(j): 1.0}, lo[j])
        n_zero = row
        for coeffs, b in self.ineqs:
            emit(coeffs, b)
        for j in has_hi:
            emit({int(j): 1.0}, hi[j])
        for j in has_lo:
            emit({int(j): -1.0}, -lo[j])
        n_nonneg = row - n_zero
        dims = []
        for rows, b, c, d in self.socs:
            # s = (c.x + d, A x + b) in SOC  <=>  -(c) x + s0 = d, -(A) x + s = b
            emit(c, d, -1.0)
            for r, bb in zip(rows, b):
                emit(r, bb, -1.0)
            dims.append(1 + len(rows))
        A = sp.csc_matrix((vals, (ri, ci)), shape=(row, n))
        A.sum_duplicates()
        self._frozen = (A, np.asarray(rhs, dtype=float), n_zero, n_nonneg, tuple(dims))
        lin = np.zeros(n)
        for i, v in self._lin.items():
            lin[i] = v
        quad = np.zeros(n)
        for i, v in self._quad.items():
            quad[i] = v
        self._lin_arr, self._quad_arr = lin, quad
        return self

    @property
    def linear_objective(self):
        self.freeze()
        return self._lin_arr

    @property
    def quadratic_objective(self):
        self.freeze()
        return self._quad_arr

    def with_objective(self, linear=None, quadratic=None, constant=None):
        """Frozen copy sharing all constraints, with a replaced objective."""
        self.freeze()
        out = copy.copy(self)
        if linear is not None:
            out._lin_arr = np.asarray(linear, dtype=float)
        if quadratic is not None:
            quad = np.asarray(quadratic, dtype=float)
            if np.any(quad < 0):
                raise ProgramError("quadratic objective coefficients must be non-negative")
            out._quad_arr = quad
        if constant is not None:
            out.constant = float(constant)
        return out

    def standard_form(self):
        A, b, n_zero, n_nonneg, dims = self.freeze()._frozen
        P = sp.diags(2.0 * self._quad_arr, format="csc")
        return StandardForm(P, self._lin_arr, self.constant, A, b, n_zero, n_nonneg, dims)

    def objective_value(self, x):
        return float(self._lin_arr @ x + self._quad_arr @ (x * x) + self.constant)

    # -- diagnostics ------------------------------------------------------

    def soc_residual_at(self, x, soc_id, relative=False):
        rows, b, c, d = self.socs[soc_id]
        lhs = math.sqrt(sum((sum(v * x[j] for j, v in r.items()) + bb) ** 2
                            for r, bb in zip(rows, b)))
        rhs = sum(v * x[j] for j, v in c.items()) + d
        res = lhs - rhs
        return res / max(1.0, rhs) if relative else res

    def max_violation(self, x):
        """Largest absolute violation of any stored constraint at ``x``."""
        x = np.asarray(x)
        worst = 0.0
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        worst = max(worst, float(np.max(np.maximum(lo - x, 0.0), initial=0.0)))
        worst = max(worst, float(np.max(np.maximum(x - hi, 0.0), initial=0.0)))
        for coeffs, b in self.eqs:
            worst = max(worst, abs(sum(v * x[j] for j, v in coeffs.items()) - b))
        for coeffs, b in self.ineqs:
            worst = max(worst, sum(v * x[j] for j, v in coeffs.items()) - b)
        for k in range(len(self.socs)):
            worst = max(worst, self.soc_residual_at(x, k))
        return worst

    def dump(self):
        """Plain-text listing of variables, rows and cones for debugging."""
        labels = self.labels()
        out = [f"# program {self.name}: {self.n_vars} vars, {len(self.eqs)} eq, "
               f"{len(self.ineqs)} ineq, {len(self.socs)} soc"]

        def term(coeffs):
            return " ".join(f"{v:+.12g}*x{j}" for j, v in sorted(coeffs.items())) or "0"

        out.append("[variables]")
        for j, (lab, lo, hi) in enumerate(zip(labels, self.lo, self.hi)):
            out.append(f"x{j} {lo:.12g} {hi:.12g} {lab}")
        out.append("[objective]")
        lin = self._lin_arr if self._lin_arr is not None else self._lin
        quad = self._quad_arr if self._quad_arr is not None else self._quad
        lin = dict(lin) if isinstance(lin, dict) else {j: v for j, v in enumerate(lin) if v}
        quad = dict(quad) if isinstance(quad, dict) else {j: v for j, v in enumerate(quad) if v}
        out.append(f"lin {term(lin)}")
        out.append(f"quad {term(quad)}")
        out.append(f"const {self.constant:.12g}")
        out.append("[eq]")
        out += [f"{term(c)} = {b:.12g}" for c, b in self.eqs]
        out.append("[ineq]")
        out += [f"{term(c)} <= {b:.12g}" for c, b in self.ineqs]
        out.append("[soc]")
        for rows, b, c, d in self.socs:
            parts = " ; ".join(f"{term(r)} {bb:+.12g}" for r, bb in zip(rows, b))
            out.append(f"|| {parts} || <= {term(c)} {d:+.12g}")
        return "\n".join(out) + "\n"


def add_variable(program, label, lo=-math.inf, hi=math.inf):
    return program.add_variable(label, lo, hi)


def add_soc(program, A, b, c, d=0.0):
    return program.add_soc(A, b, c, d)


# -- backends -------------------------------------------------------------


class SolverBackend:
    """Contract for conic solvers.

    Subclasses implement :meth:`solve_standard`. Backends with
    ``native_quadratic = False`` only ever see ``P == 0``; :func:`solve`
    rewrites any quadratic objective through a rotated-cone epigraph first.
    """

    name = "abstract"
    native_quadratic = True

    def __init__(self, tol=1e-8):
        self.tol = tol

    def solve_standard(self, form):
        """Return ``(status, x, message)`` for a :class:`StandardForm`."""
        raise NotImplementedError

    def relaxed(self, tol):
        out = copy.copy(self)
        out.tol = tol
        return out


class ClarabelBackend(SolverBackend):
    """Interior-point backend on top of Clarabel.

    ``native_quadratic=False`` forces the epigraph path, which is useful for
    checking that the reformulation is exact.
    """

    name = "clarabel"

    def __init__(self, tol=1e-9, native_quadratic=True, max_iter=200):
        super().__init__(tol)
        self.native_quadratic = native_quadratic
        self.max_iter = max_iter

    def solve_standard(self, form):
        import clarabel

        cones = []
        if form.n_zero:
            cones.append(clarabel.ZeroConeT(form.n_zero))
        if form.n_nonneg:
            cones.append(clarabel.NonnegativeConeT(form.n_nonneg))
        cones += [clarabel.SecondOrderConeT(d) for d in form.soc_dims]
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_gap_abs = self.tol
        settings.tol_gap_rel = self.tol
        settings.tol_feas = self.tol
        settings.max_iter = self.max_iter
        P = sp.triu(form.P, format="csc")
        solver = clarabel.DefaultSolver(P, form.q, form.A, form.b, cones, settings)
        res = solver.solve()
        status = str(res.status)
        x = np.asarray(res.x)
        if status.endswith("Solved") and not status.endswith("AlmostSolved"):
            return OPTIMAL, x, status
        if "AlmostSolved" in status:
            return "almost", x, status
        if "PrimalInfeasible" in status:
            return INFEASIBLE, None, status
        if "DualInfeasible" in status:
            return UNBOUNDED, None, status
        return NUMERIC_FAILURE, None, status


class CvxoptBackend(SolverBackend):
    """Linear-objective cone solver (``cvxopt.solvers.conelp``)."""

    name = "cvxopt"
    native_quadratic = False

    def solve_standard(self, form):
        from cvxopt import matrix, solvers, spmatrix

        def to_cvx(M):
            M = sp.coo_matrix(M)
            return spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)

        A = sp.csr_matrix(form.A)
        n = A.shape[1]
        Aeq, beq = A[:form.n_zero], form.b[:form.n_zero]
        G, h = A[form.n_zero:], form.b[form.n_zero:]
        dims = {"l": form.n_nonneg, "q": list(form.soc_dims), "s": []}
        opts = {"show_progress": False, "abstol": self.tol, "reltol": self.tol,
                "feastol": self.tol, "maxiters": 200}
        kwargs = {}
        if form.n_zero:
            kwargs = {"A": to_cvx(Aeq), "b": matrix(beq)}
        try:
            res = solvers.conelp(matrix(form.q), to_cvx(G), matrix(h), dims,
                                 options=opts, **kwargs)
        except (ValueError, ArithmeticError) as exc:
            return NUMERIC_FAILURE, None, str(exc)
        status = res["status"]
        if status == "optimal":
            return OPTIMAL, np.asarray(res["x"]).ravel()[:n], status
        if status == "primal infeasible":
            return INFEASIBLE, None, status
        if status == "dual infeasible":
            return UNBOUNDED, None, status
        if res.get("x") is not None:
            return "almost", np.asarray(res["x"]).ravel()[:n], status
        return NUMERIC_FAILURE, None, status


def default_backend():
    return ClarabelBackend()


def _epigraph(form):
    """Move ``sum q_i x_i^2`` into ``t`` with ``||(2 sqrt(q) x, t - 1)|| <= t + 1``."""
    diag = form.P.diagonal() / 2.0
    nz = np.flatnonzero(diag > 0)
    if not len(nz):
        return form, False
    m, n = form.A.shape
    k = len(nz)
    # cone block rows: [-(t)] , [-(2 sqrt(q_i) x_i)] , [-(t)]  with offsets 1, 0, -1
    ri = [0] + list(range(1, k + 1)) + [k + 1]
    ci = [n] + nz.tolist() + [n]
    vals = [-1.0] + (-2.0 * np.sqrt(diag[nz])).tolist() + [-1.0]
    block = sp.csc_matrix((vals, (ri, ci)), shape=(k + 2, n + 1))
    A = sp.vstack([sp.hstack([form.A, sp.csc_matrix((m, 1))]), block], format="csc")
    b = np.concatenate([form.b, [1.0], np.zeros(k), [-1.0]])
    q = np.append(form.q, 1.0)
    P = sp.csc_matrix((n + 1, n + 1))
    return StandardForm(P, q, form.r, A, b, form.n_zero, form.n_nonneg,
                        form.soc_dims + (k + 2,)), True


def solve(program, backend=None):
    """Solve ``program`` and return a :class:`Solution` (never raises on solver failure)."""
    backend = backend or default_backend()
    form = program.freeze().standard_form()
    n = program.n_vars
    reform = False
    if not backend.native_quadratic:
        form, reform = _epigraph(form)
    t0 = time.perf_counter()
    try:
        status, x, msg = backend.solve_standard(form)
    except Exception as exc:  # backend crash is reported, not raised
        status, x, msg = NUMERIC_FAILURE, None, f"{type(exc).__name__}: {exc}"
    elapsed = time.perf_counter() - t0
    if x is not None and reform:
        x = x[:n]
    if status == "almost":
        # accept only if the point is feasible to a loose tolerance
        if x is not None and program.max_violation(x) <= 1e-6:
            status = OPTIMAL
        elif backend.tol < RETRY_TOL:
            # one retry with looser stopping criteria before giving up
            return solve(program, backend.relaxed(RETRY_TOL))
        else:
            status, x = NUMERIC_FAILURE, None
    if status != OPTIMAL:
        return Solution(status, None, math.nan, elapsed, msg, program)
    return Solution(OPTIMAL, x, program.objective_value(x), elapsed, msg, program)


def soc_residual(solution, soc_id, relative=False):
    """``||A x + b|| - (c.x + d)`` at the solution; ``<= 0`` means feasible.

    With ``relative=True`` the residual is divided by ``max(1, c.x + d)``.
    """
    if not solution.optimal:
        raise ProgramError(f"residual requested for a {solution.status} solution")
    return solution.program.soc_residual_at(solution.x, soc_id, relative)
