"""Sparse linear programs, a bounded-variable revised simplex, branch and bound.

The program form mirrors the generalized statement used by the rest of the
package:

    min  P' x   s.t.   A_eq x = b_eq,   A_ub x <= b_ub,   lo <= x <= hi

Solutions carry primal values, duals in the sign convention of the
Lagrangian L = P'x + lambda'(A x - B) + mu'(C x - D) (so mu >= 0 and
P + A'lambda + C'mu - d = 0 with d the reduced costs), and the active set
of inequality rows.  The built-in engine is the reference implementation;
an adapter seam (`register_engine`) lets an external LP/MILP engine replace
it without touching callers.

Default tolerances: feasibility 1e-7, integrality 1e-6, reduced-cost
optimality 1e-8.  Problem data spans several orders of magnitude (veh/km
against minutes), so feasibility checks are scaled by 1 + |rhs|.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

FEAS_TOL = 1e-7
OPT_TOL = 1e-8
INT_TOL = 1e-6


class NumericalStallError(RuntimeError):
    """The simplex could not make progress within its iteration budget."""

    def __init__(self, message, iterations):
        super().__init__(message)
        self.iterations = iterations


class NodeLimitExceeded(RuntimeError):
    """Branch and bound hit its node limit; carries the best incumbent."""

    def __init__(self, message, incumbent, best_bound):
        super().__init__(message)
        self.incumbent = incumbent
        self.best_bound = best_bound


def _as_csr(mat, ncols):
    if mat is None:
        return sp.csr_matrix((0, ncols))
    m = sp.csr_matrix(mat)
    if m.shape[1] != ncols:
        raise ValueError(f"matrix has {m.shape[1]} columns, expected {ncols}")
    if m.nnz and not np.all(np.isfinite(m.data)):
        raise ValueError("non-finite matrix entries")
    return m


@dataclass
class LinearProgram:
    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @staticmethod
    def build(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, lo=None, hi=None):
        c = np.asarray(c, dtype=float)
        n = c.size
        A_eq = _as_csr(A_eq, n)
        A_ub = _as_csr(A_ub, n)
        b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
        b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
        lo = np.zeros(n) if lo is None else np.asarray(lo, dtype=float)
        hi = np.full(n, np.inf) if hi is None else np.asarray(hi, dtype=float)
        if b_eq.size != A_eq.shape[0] or b_ub.size != A_ub.shape[0]:
            raise ValueError("rhs length does not match matrix rows")
        if lo.size != n or hi.size != n:
            raise ValueError("bound vectors must have one entry per variable")
        if np.any(lo > hi + 1e-12):
            raise ValueError("lower bound above upper bound")
        return LinearProgram(c, A_eq, b_eq, A_ub, b_ub, lo, hi)

    @property
    def n(self):
        return self.c.size

    @property
    def n_eq(self):
        return self.A_eq.shape[0]

    @property
    def n_ub(self):
        return self.A_ub.shape[0]

    def with_bounds(self, lo, hi):
        return replace(self, lo=lo, hi=hi)


@dataclass
class MixedProgram:
    base: LinearProgram
    binary_idx: np.ndarray

    def __post_init__(self):
        self.binary_idx = np.asarray(self.binary_idx, dtype=int)
        lo = self.base.lo[self.binary_idx]
        hi = self.base.hi[self.binary_idx]
        if np.any(lo < -1e-12) or np.any(hi > 1 + 1e-12):
            raise ValueError("binary variables must have bounds within [0, 1]")


@dataclass
class LPSolution:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    duals_eq: np.ndarray | None = None       # lambda, free sign
    duals_ub: np.ndarray | None = None       # mu >= 0
    reduced_costs: np.ndarray | None = None  # d = c + A'lambda + C'mu
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def active_set(self):
        """Indices of inequality rows with strictly positive multiplier."""
        if self.duals_ub is None:
            return np.zeros(0, dtype=int)
        return np.nonzero(self.duals_ub > OPT_TOL)[0]


def kkt_residuals(lp: LinearProgram, sol: LPSolution):
    """Max-norm residuals of primal feasibility, dual feasibility,
    stationarity and complementary slackness."""
    x, lam, mu, d = sol.x, sol.duals_eq, sol.duals_ub, sol.reduced_costs
    res = {}
    res["primal_eq"] = float(np.max(np.abs(lp.A_eq @ x - lp.b_eq) / (1 + np.abs(lp.b_eq)))) if lp.n_eq else 0.0
    slack = lp.b_ub - lp.A_ub @ x if lp.n_ub else np.zeros(0)
    res["primal_ub"] = float(np.max(-slack / (1 + np.abs(lp.b_ub)), initial=0.0)) if lp.n_ub else 0.0
    res["bounds"] = float(max(np.max(lp.lo - x, initial=0.0), np.max(x - lp.hi, initial=0.0)))
    res["dual_sign"] = float(np.max(-mu, initial=0.0)) if lp.n_ub else 0.0
    res["compl_slack"] = float(np.max(mu * np.abs(slack), initial=0.0)) if lp.n_ub else 0.0
    stat = lp.c + (lp.A_eq.T @ lam if lp.n_eq else 0) + (lp.A_ub.T @ mu if lp.n_ub else 0) - d
    res["stationarity"] = float(np.max(np.abs(stat)))
    # reduced-cost sign against the bound each variable sits at
    at_lo = np.abs(x - lp.lo) <= 1e-6 * (1 + np.abs(lp.lo))
    at_hi = np.abs(x - lp.hi) <= 1e-6 * (1 + np.abs(np.where(np.isfinite(lp.hi), lp.hi, 0.0)))
    interior = ~(at_lo | at_hi)
    res["reduced_cost_sign"] = float(max(
        np.max(-d[at_lo & ~at_hi], initial=0.0),
        np.max(d[at_hi & ~at_lo], initial=0.0),
        np.max(np.abs(d[interior]), initial=0.0),
    ))
    return res


# ---------------------------------------------------------------------------
# presolve: fixed columns, empty rows, singleton/doubleton equality rows


@dataclass
class _Elim:
    kind: str            # "row_fix" (singleton) or "subst" (doubleton)
    row: int             # original equality-row id
    var: int             # eliminated variable (original id)
    coef_var: float      # coefficient of eliminated var in that row
    partner: int = -1    # surviving variable (doubleton only)
    coef_partner: float = 0.0
    rhs: float = 0.0
    col_snapshot: list = field(default_factory=list)  # [(is_eq, row_id, coef)] excluding `row`
    c_var: float = 0.0


class _Presolve:
    """Equality-driven reductions with exact primal/dual postsolve."""

    def __init__(self, lp: LinearProgram):
        self.orig = lp
        self.n = lp.n
        # work in dictionaries of columns for cheap substitution
        self.cols_eq = [dict() for _ in range(self.n)]
        self.cols_ub = [dict() for _ in range(self.n)]
        A = lp.A_eq.tocoo()
        for r, ccol, v in zip(A.row, A.col, A.data):
            if v != 0.0:
                self.cols_eq[ccol][int(r)] = self.cols_eq[ccol].get(int(r), 0.0) + float(v)
        A = lp.A_ub.tocoo()
        for r, ccol, v in zip(A.row, A.col, A.data):
            if v != 0.0:
                self.cols_ub[ccol][int(r)] = self.cols_ub[ccol].get(int(r), 0.0) + float(v)
        self.c = lp.c.astype(float).copy()
        self.b_eq = lp.b_eq.astype(float).copy()
        self.b_ub = lp.b_ub.astype(float).copy()
        self.lo = lp.lo.astype(float).copy()
        self.hi = lp.hi.astype(float).copy()
        self.row_vars = [set() for _ in range(lp.n_eq)]
        for j in range(self.n):
            for r in self.cols_eq[j]:
                self.row_vars[r].add(j)
        self.alive_var = np.ones(self.n, dtype=bool)
        self.alive_row = np.ones(lp.n_eq, dtype=bool)
        self.fixed_val = np.full(self.n, np.nan)
        self.elims: list[_Elim] = []
        self.obj_const = 0.0
        self.infeasible = False

    # -- helpers ----------------------------------------------------------

    def _fix_var(self, j, val):
        tol = 1e-9 * (1 + abs(val))
        if val < self.lo[j] - tol or val > self.hi[j] + tol:
            self.infeasible = True
            return
        self.fixed_val[j] = val
        self.alive_var[j] = False
        for r, v in self.cols_eq[j].items():
            if self.alive_row[r]:
                self.b_eq[r] -= v * val
                self.row_vars[r].discard(j)
        for r, v in self.cols_ub[j].items():
            self.b_ub[r] -= v * val
        self.obj_const += self.c[j] * val

    def _snapshot_col(self, j, skip_row):
        snap = [(True, r, v) for r, v in self.cols_eq[j].items()
                if self.alive_row[r] and r != skip_row]
        snap += [(False, r, v) for r, v in self.cols_ub[j].items()]
        return snap

    def _merge_alias(self, row, keep, elim):
        """Row: a*keep - a*elim = 0, i.e. elim == keep, with elim's bounds no
        tighter than keep's.  The merged variable keeps `keep`'s bounds, so a
        binding bound is always attributable to `keep`; zeroing the eliminated
        variable's reduced cost in postsolve is then an exact dual restore.
        """
        b = self.cols_eq[elim][row]
        a = self.cols_eq[keep][row]
        rec = _Elim("subst", row, elim, b, keep, a, 0.0,
                    self._snapshot_col(elim, row), self.c[elim])
        for r, v in list(self.cols_eq[elim].items()):
            if not self.alive_row[r] or r == row:
                continue
            self.cols_eq[keep][r] = self.cols_eq[keep].get(r, 0.0) + v
            self.row_vars[r].discard(elim)
            if abs(self.cols_eq[keep][r]) < 1e-14:
                del self.cols_eq[keep][r]
                self.row_vars[r].discard(keep)
            else:
                self.row_vars[r].add(keep)
        for r, v in list(self.cols_ub[elim].items()):
            self.cols_ub[keep][r] = self.cols_ub[keep].get(r, 0.0) + v
            if abs(self.cols_ub[keep][r]) < 1e-14:
                del self.cols_ub[keep][r]
        self.c[keep] += self.c[elim]
        self.alive_var[elim] = False
        self.alive_row[row] = False
        self.elims.append(rec)

    # -- main loop --------------------------------------------------------

    def run(self, merge_doubletons=True):
        for j in range(self.n):
            if self.alive_var[j] and self.lo[j] == self.hi[j]:
                self._fix_var(j, self.lo[j])
        changed = True
        while changed and not self.infeasible:
            changed = False
            for r in range(len(self.row_vars)):
                if not self.alive_row[r]:
                    continue
                live = [j for j in self.row_vars[r] if self.alive_var[j]]
                if len(live) == 0:
                    if abs(self.b_eq[r]) > 1e-7 * (1 + abs(self.orig.b_eq[r])):
                        self.infeasible = True
                    self.alive_row[r] = False
                    self.elims.append(_Elim("row_empty", r, -1, 0.0))
                    changed = True
                elif len(live) == 1:
                    j = live[0]
                    coef = self.cols_eq[j][r]
                    val = self.b_eq[r] / coef
                    self.elims.append(_Elim("row_fix", r, j, coef, -1, 0.0, self.b_eq[r],
                                            self._snapshot_col(j, r), self.c[j]))
                    self.alive_row[r] = False
                    self._fix_var(j, val)
                    changed = True
                elif len(live) == 2 and merge_doubletons and abs(self.b_eq[r]) == 0.0:
                    j1, j2 = sorted(live)
                    a1 = self.cols_eq[j1][r]
                    a2 = self.cols_eq[j2][r]
                    if a1 != -a2:
                        continue
                    # eliminate whichever alias has the looser-or-equal bounds
                    if self.lo[j2] <= self.lo[j1] and self.hi[j2] >= self.hi[j1]:
                        keep, elim = j1, j2
                    elif self.lo[j1] <= self.lo[j2] and self.hi[j1] >= self.hi[j2]:
                        keep, elim = j2, j1
                    else:
                        continue
                    self._merge_alias(r, keep, elim)
                    changed = True

    def reduced_program(self):
        keep = np.nonzero(self.alive_var)[0]
        rows_eq = np.nonzero(self.alive_row)[0]
        self.keep_cols = keep
        self.keep_rows_eq = rows_eq
        pos = {j: i for i, j in enumerate(keep)}
        rpos = {r: i for i, r in enumerate(rows_eq)}
        data, ri, ci = [], [], []
        for j in keep:
            for r, v in self.cols_eq[j].items():
                if self.alive_row[r] and abs(v) > 0:
                    ri.append(rpos[r]); ci.append(pos[j]); data.append(v)
        A_eq = sp.csr_matrix((data, (ri, ci)), shape=(len(rows_eq), len(keep)))
        data, ri, ci = [], [], []
        for j in keep:
            for r, v in self.cols_ub[j].items():
                if abs(v) > 0:
                    ri.append(r); ci.append(pos[j]); data.append(v)
        A_ub = sp.csr_matrix((data, (ri, ci)), shape=(self.orig.n_ub, len(keep)))
        return LinearProgram(self.c[keep], A_eq, self.b_eq[rows_eq], A_ub,
                             self.b_ub, self.lo[keep], self.hi[keep])

    def postsolve(self, red: LPSolution) -> LPSolution:
        if red.status != OPTIMAL:
            return LPSolution(status=red.status, iterations=red.iterations)
        n = self.n
        x = np.array(self.fixed_val)
        x[self.keep_cols] = red.x
        lam = np.zeros(self.orig.n_eq)
        lam[self.keep_rows_eq] = red.duals_eq
        mu = red.duals_ub.copy()
        # restore eliminated variables/rows in reverse order
        for rec in reversed(self.elims):
            if rec.kind == "row_empty":
                continue
            if rec.kind == "subst":
                x[rec.var] = (rec.rhs - rec.coef_partner * x[rec.partner]) / rec.coef_var
            # pick the removed row's dual so the eliminated variable's
            # reduced cost vanishes (it behaves as basic through the merge)
            d_partial = rec.c_var
            for is_eq, r, v in rec.col_snapshot:
                d_partial += v * (lam[r] if is_eq else mu[r])
            lam[rec.row] = -d_partial / rec.coef_var
        d = self.orig.c + (self.orig.A_eq.T @ lam if self.orig.n_eq else 0) \
            + (self.orig.A_ub.T @ mu if self.orig.n_ub else 0)
        obj = float(self.orig.c @ x)
        return LPSolution(OPTIMAL, x, obj, lam, mu, np.asarray(d), red.iterations)


# ---------------------------------------------------------------------------
# bounded-variable revised simplex with product-form inverse


class _Simplex:
    def __init__(self, lp: LinearProgram, feas_tol=FEAS_TOL, opt_tol=OPT_TOL, max_iter=None,
                 refactor_every=80, piv_tol=1e-8, bland_start=False):
        self.REFACTOR_EVERY = refactor_every
        self.piv_tol = piv_tol
        self.bland_start = bland_start
        self.lp = lp
        self.m = lp.n_eq + lp.n_ub
        self.n_struct = lp.n
        self.n_slack = lp.n_ub
        self.n_total = self.n_struct + self.n_slack
        self.feas_tol = feas_tol
        self.opt_tol = opt_tol
        self.max_iter = max_iter or max(4000, 60 * self.m)
        M = sp.vstack([lp.A_eq, lp.A_ub]) if self.m else sp.csr_matrix((0, lp.n))
        slack_cols = sp.vstack([
            sp.csr_matrix((lp.n_eq, lp.n_ub)),
            sp.identity(lp.n_ub, format="csr"),
        ]) if self.m else sp.csr_matrix((0, 0))
        self.M = sp.hstack([M, slack_cols], format="csc") if self.m else sp.csc_matrix((0, self.n_total))
        self.MT = self.M.T.tocsr()
        self.b = np.concatenate([lp.b_eq, lp.b_ub])
        self.lo = np.concatenate([lp.lo, np.zeros(self.n_slack)])
        self.hi = np.concatenate([lp.hi, np.full(self.n_slack, np.inf)])
        self.scale = 1.0 + np.abs(self.b)
        # artificials: one per row, created lazily in phase 1
        self.art_sign = np.zeros(self.m)
        self.iterations = 0

    # -- column access (structural/slack vs artificial) -------------------

    def _col_dense(self, j):
        v = np.zeros(self.m)
        if j < self.n_total:
            a, b = self.M.indptr[j], self.M.indptr[j + 1]
            v[self.M.indices[a:b]] = self.M.data[a:b]
        else:
            r = j - self.n_total
            v[r] = self.art_sign[r]
        return v

    # -- factorization ----------------------------------------------------

    def _refactor(self):
        rows, cols, vals = [], [], []
        for pos, j in enumerate(self.basis):
            if j < self.n_total:
                a, b = self.M.indptr[j], self.M.indptr[j + 1]
                rr = self.M.indices[a:b]
                rows.append(rr)
                cols.append(np.full(rr.size, pos, dtype=np.int64))
                vals.append(self.M.data[a:b])
            else:
                r = j - self.n_total
                rows.append(np.array([r], dtype=np.int64))
                cols.append(np.array([pos], dtype=np.int64))
                vals.append(np.array([self.art_sign[r]]))
        B = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.m, self.m))
        try:
            self.lu = splu(B, permc_spec="COLAMD", options=dict(SymmetricMode=False))
        except RuntimeError as exc:
            raise NumericalStallError(
                f"basis factorization failed: {exc}", self.iterations) from None
        self.etas = []

    def ftran(self, v):
        y = self.lu.solve(v)
        for r, w, wr in self.etas:
            t = y[r] / wr
            if t != 0.0:
                y -= w * t
            y[r] = t
        return y

    def btran(self, v):
        y = v.copy()
        for r, w, wr in reversed(self.etas):
            s = (y[r] - w @ y + wr * y[r]) / wr
            y[r] = s
        return self.lu.solve(y, trans="T")

    # -- state ------------------------------------------------------------

    def _nb_value(self, j):
        if self.stat[j] == 0:
            return self.lo[j] if np.isfinite(self.lo[j]) else 0.0
        return self.hi[j]

    def _nb_values_vec(self):
        """Values of all structural+slack columns; basic entries zero."""
        lo = self.lo[: self.n_total]
        hi = self.hi[: self.n_total]
        stat = self.stat[: self.n_total]
        v = np.where(stat == 1, hi, np.where(np.isfinite(lo), lo, 0.0))
        v[stat == 2] = 0.0
        return v

    def _recompute_xb(self):
        v = self._nb_values_vec()
        rhs = self.b - (self.M @ v)
        # nonbasic artificials always sit at zero
        self.x_b = self.ftran(rhs)

    # -- core loop ---------------------------------------------------------

    def _price(self, c_full):
        cb = c_full[self.basis]
        y = self.btran(cb)
        d = c_full[: self.n_total] - self.MT @ y
        d_art = c_full[self.n_total:] - self.art_sign * y if self.n_cols > self.n_total else np.zeros(0)
        return y, np.concatenate([d, d_art])

    def _choose_entering(self, d, bland):
        movable = (self.stat != 2) & (self.lo[: self.n_cols] != self.hi[: self.n_cols])
        free = ~np.isfinite(self.lo[: self.n_cols]) & ~np.isfinite(self.hi[: self.n_cols])
        elig_up = movable & ((self.stat == 0) | free) & (d < -self.opt_tol)
        elig_dn = movable & ((self.stat == 1) | free) & (d > self.opt_tol)
        if not (elig_up.any() or elig_dn.any()):
            return -1, 0
        if bland:
            idx_up = np.nonzero(elig_up)[0]
            idx_dn = np.nonzero(elig_dn)[0]
            j_up = idx_up[0] if idx_up.size else self.n_cols
            j_dn = idx_dn[0] if idx_dn.size else self.n_cols
            return (int(j_up), 1) if j_up <= j_dn else (int(j_dn), -1)
        score = np.where(elig_up, -d, 0.0)
        score = np.maximum(score, np.where(elig_dn, d, 0.0))
        j = int(np.argmax(score))
        return j, (1 if elig_up[j] else -1)

    def _ratio_test(self, j, direction, w):
        """Two-pass (Harris) ratio test: first find the blocking step under
        feasibility-tolerance-relaxed bounds, then among rows whose exact
        ratio does not exceed it pick the largest pivot.  Trades bound
        violations up to the feasibility tolerance for numerical stability.
        """
        t_own = self.hi[j] - self.lo[j] if np.isfinite(self.hi[j]) and np.isfinite(self.lo[j]) else np.inf
        piv_tol = self.piv_tol
        wb = w * direction
        lob = self.lo[self.basis]
        hib = self.hi[self.basis]
        lims = np.full(self.m, np.inf)
        relaxed = np.full(self.m, np.inf)
        pos = wb > piv_tol
        if pos.any():
            slack = self.feas_tol * (1 + np.abs(lob[pos]))
            lims[pos] = (self.x_b[pos] - lob[pos]) / wb[pos]
            relaxed[pos] = (self.x_b[pos] - lob[pos] + slack) / wb[pos]
        neg = (wb < -piv_tol) & np.isfinite(hib)
        if neg.any():
            slack = self.feas_tol * (1 + np.abs(hib[neg]))
            lims[neg] = (self.x_b[neg] - hib[neg]) / wb[neg]
            relaxed[neg] = (self.x_b[neg] - hib[neg] - slack) / wb[neg]
        np.maximum(lims, 0.0, out=lims)
        np.maximum(relaxed, 0.0, out=relaxed)
        t_relaxed = relaxed.min() if self.m else np.inf
        if t_own <= t_relaxed:
            return t_own, -1
        if not np.isfinite(t_relaxed):
            return np.inf, -1
        cand = lims <= t_relaxed
        scores = np.where(cand, np.abs(w), -1.0)
        # among admissible blockers prefer evicting artificials, then the
        # largest pivot; keeps phase 1 from shuffling zero-valued artificials
        art = cand & (self.basis >= self.n_total)
        if art.any():
            scores = np.where(art, scores + 1e3, scores)
        leave_pos = int(np.argmax(scores))
        return float(lims[leave_pos]), leave_pos

    def _iterate(self, c_full, phase):
        degen_run = 0
        while True:
            if self.iterations >= self.max_iter:
                raise NumericalStallError(
                    f"simplex stalled in phase {phase}", self.iterations)
            bland = self.bland_start or degen_run > max(200, self.m // 2)
            y, d = self._price(c_full)
            j, direction = self._choose_entering(d, bland)
            if j < 0:
                return y, d
            w = self.ftran(self._col_dense(j))
            t, leave_pos = self._ratio_test(j, direction, w)
            if not np.isfinite(t):
                return None  # unbounded
            self.iterations += 1
            degen_run = degen_run + 1 if t < 1e-11 else 0
            if leave_pos < 0:
                # bound flip
                self.x_b -= (direction * t) * w
                self.stat[j] = 1 - self.stat[j]
                continue
            enter_val = self._nb_value(j) + direction * t
            leave_j = self.basis[leave_pos]
            wb = w[leave_pos] * direction
            self.stat[leave_j] = 0 if wb > 0 else 1
            self.x_b -= (direction * t) * w
            self.x_b[leave_pos] = enter_val
            self.basis[leave_pos] = j
            self.stat[j] = 2
            self.etas.append((leave_pos, w, w[leave_pos]))
            if len(self.etas) >= self.REFACTOR_EVERY:
                self._refactor()
                self._recompute_xb()

    def solve(self):
        lp = self.lp
        if self.m == 0:
            return self._solve_unconstrained()
        # initial nonbasic point: bound nearest zero
        self.n_cols = self.n_total + self.m
        self.stat = np.zeros(self.n_cols, dtype=np.int8)
        for j in range(self.n_total):
            lo, hi = self.lo[j], self.hi[j]
            if np.isfinite(lo) and np.isfinite(hi) and abs(hi) < abs(lo):
                self.stat[j] = 1
            elif not np.isfinite(lo) and np.isfinite(hi):
                self.stat[j] = 1
        x0 = np.array([self._nb_value(j) for j in range(self.n_total)])
        r = self.b - (self.M @ x0 if self.m else np.zeros(0))
        # basis: slack where feasible, artificial elsewhere
        self.basis = np.zeros(self.m, dtype=int)
        art_lo = np.zeros(self.m)
        art_hi = np.zeros(self.m)
        need_phase1 = False
        for i in range(self.m):
            slack_j = self.n_total - self.n_slack + (i - lp.n_eq) if i >= lp.n_eq else -1
            if slack_j >= 0 and r[i] >= 0:
                self.basis[i] = slack_j
                self.stat[slack_j] = 2
                self.art_sign[i] = 1.0
            else:
                if slack_j >= 0:
                    self.stat[slack_j] = 0
                self.art_sign[i] = 1.0 if r[i] >= 0 else -1.0
                self.basis[i] = self.n_total + i
                self.stat[self.n_total + i] = 2
                art_hi[i] = np.inf
                need_phase1 = need_phase1 or abs(r[i]) > self.feas_tol * self.scale[i]
        self.lo = np.concatenate([self.lo, art_lo])
        self.hi = np.concatenate([self.hi, art_hi])
        self._refactor()
        self._recompute_xb()

        if need_phase1:
            c1 = np.zeros(self.n_cols)
            c1[self.n_total:] = 1.0
            out = self._iterate(c1, phase=1)
            if out is None:
                raise NumericalStallError("phase 1 unbounded", self.iterations)
            art_vals = self.x_b[self.basis >= self.n_total]
            infeas = float(np.sum(np.abs(art_vals))) if art_vals.size else 0.0
            if infeas > self.feas_tol * float(np.max(self.scale)):
                return LPSolution(INFEASIBLE, iterations=self.iterations)
        # freeze artificials at zero for phase 2
        self.hi[self.n_total:] = 0.0
        c2 = np.zeros(self.n_cols)
        c2[: self.n_struct] = lp.c
        out = self._iterate(c2, phase=2)
        if out is None:
            return LPSolution(UNBOUNDED, iterations=self.iterations)
        y, d = out
        # assemble full primal
        x_full = np.array([self._nb_value(j) for j in range(self.n_total)])
        for p, j in enumerate(self.basis):
            if j < self.n_total:
                x_full[j] = self.x_b[p]
        x = x_full[: self.n_struct]
        lam = -y[: lp.n_eq]
        mu = np.maximum(-y[lp.n_eq:], 0.0)
        dred = d[: self.n_struct]
        obj = float(lp.c @ x)
        return LPSolution(OPTIMAL, x, obj, lam, mu, dred, self.iterations)

    def _solve_unconstrained(self):
        lp = self.lp
        x = np.zeros(lp.n)
        for j in range(lp.n):
            if lp.c[j] > 0:
                if not np.isfinite(lp.lo[j]):
                    return LPSolution(UNBOUNDED)
                x[j] = lp.lo[j]
            elif lp.c[j] < 0:
                if not np.isfinite(lp.hi[j]):
                    return LPSolution(UNBOUNDED)
                x[j] = lp.hi[j]
            else:
                x[j] = lp.lo[j] if np.isfinite(lp.lo[j]) else 0.0
        return LPSolution(OPTIMAL, x, float(lp.c @ x), np.zeros(0), np.zeros(0),
                          lp.c.copy(), 0)


# ---------------------------------------------------------------------------
# engines


class BuiltinEngine:
    """Reference engine: presolve + bounded revised simplex."""

    name = "builtin"

    def solve_lp(self, lp: LinearProgram, feas_tol=FEAS_TOL, presolve=True) -> LPSolution:
        if presolve:
            pre = _Presolve(lp)
            pre.run()
            if pre.infeasible:
                return LPSolution(INFEASIBLE)
            red = pre.reduced_program()
            if red.n == 0:
                # everything decided by presolve
                sol = LPSolution(OPTIMAL, np.zeros(0), 0.0, np.zeros(red.n_eq),
                                 np.zeros(red.n_ub), np.zeros(0), 0)
                feas = _check_fixed_feasible(red)
                if not feas:
                    return LPSolution(INFEASIBLE)
                return pre.postsolve(sol)
            sol = _solve_with_retry(red, feas_tol)
            return pre.postsolve(sol)
        return _solve_with_retry(lp, feas_tol)


def _solve_with_retry(lp_red: LinearProgram, feas_tol):
    """Run the simplex; on numerical trouble (stall, singular basis) retry
    with stricter pivot tolerances, finally with Bland's rule throughout."""
    attempts = (
        dict(),
        dict(refactor_every=25, piv_tol=3e-7,
             max_iter=120 * (lp_red.n_eq + lp_red.n_ub + 10)),
        dict(refactor_every=15, piv_tol=1e-6, bland_start=True,
             max_iter=400 * (lp_red.n_eq + lp_red.n_ub + 10)),
    )
    last = None
    for kwargs in attempts:
        try:
            return _Simplex(lp_red, feas_tol=feas_tol, **kwargs).solve()
        except NumericalStallError as exc:
            last = exc
    raise last


def _check_fixed_feasible(lp: LinearProgram) -> bool:
    ok = True
    if lp.n_eq:
        ok &= bool(np.all(np.abs(lp.b_eq) <= FEAS_TOL * (1 + np.abs(lp.b_eq))))
    if lp.n_ub:
        ok &= bool(np.all(lp.b_ub >= -FEAS_TOL * (1 + np.abs(lp.b_ub))))
    return ok


class ScipyEngine:
    """Adapter around scipy.optimize.linprog / milp (external cross-check)."""

    name = "scipy"

    def solve_lp(self, lp: LinearProgram, feas_tol=FEAS_TOL, presolve=True) -> LPSolution:
        from scipy.optimize import linprog

        res = linprog(
            lp.c,
            A_ub=lp.A_ub if lp.n_ub else None,
            b_ub=lp.b_ub if lp.n_ub else None,
            A_eq=lp.A_eq if lp.n_eq else None,
            b_eq=lp.b_eq if lp.n_eq else None,
            bounds=np.column_stack([lp.lo, lp.hi]),
            method="highs",
        )
        if res.status == 2:
            return LPSolution(INFEASIBLE)
        if res.status == 3:
            return LPSolution(UNBOUNDED)
        if not res.success:
            raise NumericalStallError(f"scipy linprog: {res.message}", 0)
        lam = -np.asarray(res.eqlin.marginals) if lp.n_eq else np.zeros(0)
        mu = np.maximum(-np.asarray(res.ineqlin.marginals), 0.0) if lp.n_ub else np.zeros(0)
        d = lp.c + (lp.A_eq.T @ lam if lp.n_eq else 0) + (lp.A_ub.T @ mu if lp.n_ub else 0)
        return LPSolution(OPTIMAL, res.x, float(res.fun), lam, mu, np.asarray(d))


_ENGINES = {"builtin": BuiltinEngine(), "scipy": ScipyEngine()}
_DEFAULT_ENGINE = "builtin"


def register_engine(name, engine):
    _ENGINES[name] = engine


def get_engine(name=None):
    return _ENGINES[name or _DEFAULT_ENGINE]


def set_default_engine(name):
    global _DEFAULT_ENGINE
    if name not in _ENGINES:
        raise KeyError(f"unknown engine {name!r}")
    _DEFAULT_ENGINE = name


def solve_lp(lp: LinearProgram, feas_tol=FEAS_TOL, engine=None) -> LPSolution:
    return get_engine(engine).solve_lp(lp, feas_tol=feas_tol)


# ---------------------------------------------------------------------------
# branch and bound


def _fractional(x, binary_idx):
    vals = x[binary_idx]
    frac = np.abs(vals - np.round(vals))
    worst = int(np.argmax(frac))
    return frac, worst


def solve_mip(
    mp: MixedProgram,
    feas_tol=FEAS_TOL,
    int_tol=INT_TOL,
    node_limit=20000,
    engine=None,
    incumbent_hint=None,
) -> LPSolution:
    """Best-first branch and bound over the binary index set.

    Branching picks the most fractional binary; children are explored in
    bound order with a deterministic tie-break.  `incumbent_hint` may carry
    a feasible full-length x vector used for pruning from the start.
    """
    lp = mp.base
    bins = mp.binary_idx
    eng = get_engine(engine)
    if bins.size == 0:
        return eng.solve_lp(lp, feas_tol=feas_tol)

    inc_obj = np.inf
    inc_sol = None
    inc_from_hint = False
    if incumbent_hint is not None:
        xh = np.asarray(incumbent_hint, dtype=float)
        if _hint_feasible(lp, bins, xh, feas_tol, int_tol):
            inc_obj = float(lp.c @ xh)
            inc_sol = LPSolution(OPTIMAL, xh, inc_obj)
            inc_from_hint = True

    gap = lambda: 1e-9 * (1 + abs(inc_obj) if np.isfinite(inc_obj) else 1)
    heap = []
    seq = 0
    nodes = 0
    root = eng.solve_lp(lp, feas_tol=feas_tol)
    if root.status == INFEASIBLE:
        return LPSolution(INFEASIBLE)
    if root.status == UNBOUNDED:
        return LPSolution(UNBOUNDED)
    heapq.heappush(heap, (root.objective, seq, {}, root))
    best_bound = root.objective

    while heap:
        bound, _, fixes, sol = heapq.heappop(heap)
        best_bound = bound
        if bound >= inc_obj - gap():
            break
        frac, worst = _fractional(sol.x, bins)
        if frac[worst] <= int_tol:
            if sol.objective < inc_obj - gap() or inc_sol is None:
                inc_obj, inc_sol, inc_from_hint = sol.objective, sol, False
            continue
        j = int(bins[worst])
        near = int(round(sol.x[j]))
        for val in (near, 1 - near):
            nodes += 1
            if nodes > node_limit:
                raise NodeLimitExceeded(
                    f"branch and bound exceeded {node_limit} nodes",
                    incumbent=inc_sol, best_bound=best_bound)
            child_fixes = dict(fixes)
            child_fixes[j] = val
            lo = lp.lo.copy()
            hi = lp.hi.copy()
            for jj, vv in child_fixes.items():
                lo[jj] = hi[jj] = float(vv)
            child = eng.solve_lp(lp.with_bounds(lo, hi), feas_tol=feas_tol)
            if child.status != OPTIMAL:
                continue
            if child.objective >= inc_obj - gap():
                continue
            cf, cw = _fractional(child.x, bins)
            if cf[cw] <= int_tol:
                if child.objective < inc_obj - gap() or inc_sol is None:
                    inc_obj, inc_sol, inc_from_hint = child.objective, child, False
            else:
                seq += 1
                heapq.heappush(heap, (child.objective, seq, child_fixes, child))

    if inc_sol is None:
        return LPSolution(INFEASIBLE, extra={"nodes": nodes})
    if inc_from_hint or np.any(np.abs(inc_sol.x[bins] - np.round(inc_sol.x[bins])) > 0):
        # polish: re-solve with binaries pinned to the incumbent pattern so the
        # returned solution is a clean vertex with duals
        lo = lp.lo.copy()
        hi = lp.hi.copy()
        vals = np.round(inc_sol.x[bins])
        lo[bins] = hi[bins] = vals
        polished = eng.solve_lp(lp.with_bounds(lo, hi), feas_tol=feas_tol)
        if polished.status == OPTIMAL and polished.objective <= inc_obj + 1e-7 * (1 + abs(inc_obj)):
            inc_sol = polished
    inc_sol.extra["nodes"] = nodes
    inc_sol.extra["best_bound"] = best_bound if heap else inc_sol.objective
    return inc_sol


def _hint_feasible(lp, bins, x, feas_tol, int_tol):
    if x.size != lp.n:
        return False
    if np.any(x < lp.lo - 1e-7) or np.any(x > lp.hi + 1e-7):
        return False
    if lp.n_eq and np.max(np.abs(lp.A_eq @ x - lp.b_eq) / (1 + np.abs(lp.b_eq))) > 10 * feas_tol:
        return False
    if lp.n_ub and np.max((lp.A_ub @ x - lp.b_ub) / (1 + np.abs(lp.b_ub))) > 10 * feas_tol:
        return False
    return bool(np.all(np.abs(x[bins] - np.round(x[bins])) <= int_tol))


# ---------------------------------------------------------------------------
# LP-format text dump


def dump_lp_format(lp: LinearProgram, path, name="program", binary_idx=()):
    """Write the program in CPLEX LP text format for external cross-checks."""
    bins = set(int(i) for i in np.asarray(binary_idx, dtype=int).ravel()) if len(binary_idx) else set()

    def term(coef, j, lead):
        s = "" if (coef >= 0 and lead) else ("+ " if coef >= 0 else "- ")
        return f"{s}{abs(coef):.12g} x{j}"

    def row_text(row):
        idx = row.indices
        dat = row.data
        parts = [term(dat[i], idx[i], i == 0) for i in range(len(idx))]
        return " ".join(parts) if parts else "0 x0"

    with open(path, "w") as fh:
        fh.write(f"\\ {name}\nMinimize\n obj: ")
        parts = [term(c, j, j == 0) for j, c in enumerate(lp.c) if c != 0]
        fh.write((" ".join(parts) if parts else "0 x0") + "\n")
        fh.write("Subject To\n")
        A_eq = lp.A_eq.tocsr()
        for i in range(lp.n_eq):
            fh.write(f" e{i}: {row_text(A_eq[i])} = {lp.b_eq[i]:.12g}\n")
        A_ub = lp.A_ub.tocsr()
        for i in range(lp.n_ub):
            fh.write(f" c{i}: {row_text(A_ub[i])} <= {lp.b_ub[i]:.12g}\n")
        fh.write("Bounds\n")
        for j in range(lp.n):
            lo, hi = lp.lo[j], lp.hi[j]
            lo_s = "-inf" if not np.isfinite(lo) else f"{lo:.12g}"
            hi_s = "+inf" if not np.isfinite(hi) else f"{hi:.12g}"
            fh.write(f" {lo_s} <= x{j} <= {hi_s}\n")
        if bins:
            fh.write("Binaries\n " + " ".join(f"x{j}" for j in sorted(bins)) + "\n")
        fh.write("End\n")
