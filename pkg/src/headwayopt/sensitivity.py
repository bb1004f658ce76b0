"""Gradient of total travel time with respect to the headway field.

At a solved LP (regime binaries frozen at their incumbent values; gradients
through discrete regime flips are undefined), differentiating the KKT
conditions gives a block linear system

    [ P'   0    0    -1 ] [dx  ]     [ 0                                  ]
    [ 0    A'   C'    0 ] [dlam]     [ sum_i lam_i da_i + sum_j mu_j dc_j ]
    [ A    0    0     0 ] [dmu ]  = -[ d(A x*) - dB                       ] dh
    [ C_K  0    0     0 ] [dz  ]     [ d(C_K x*) - dD_K                   ]

where C stacks the inequality rows and both bound sides of every variable,
and C_K keeps the rows with strictly positive multiplier.  The matrix is
rectangular whenever some active row carries a zero multiplier, so the
system is solved through the Moore-Penrose generalized inverse (dense SVD
with a relative cutoff for small systems, an iterative minimum-norm solve
of the single objective row for large ones).

Headway units: derivatives are taken in minutes internally and reported in
seconds at the interface, matching headway fields everywhere else.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsmr

from . import lp, sodta
from .network import DemandProfile, GlobalParams, Network
from .units import SECONDS_PER_MINUTE

DENSE_LIMIT = 1600         # max Q dimension for the full-SVD path
SV_CUTOFF = 1e-10          # relative singular-value cutoff


@dataclass
class ParametricLP:
    """A linear program whose rows depend affinely on a parameter vector.

    hdep_* lists run parallel to the rows: None, or a tuple
    (h_index, ((column, dcoef/dh), ...), drhs/dh) giving the analytic
    derivative of that row with respect to one parameter component.
    """

    program: lp.LinearProgram
    hdep_eq: list
    hdep_ub: list
    m: int


def from_system(system: sodta.ConstraintSystem) -> ParametricLP:
    """Parametric view of an assembled SO-DTA system (regimes frozen)."""
    if system.fixed_delta is None:
        raise ValueError("freeze the regime binaries before differentiating "
                         "(build the system with fixed_delta)")
    N = system.index.N

    def conv(hd):
        if hd is None:
            return None
        p, k = hd.cell
        return (p * N + (k - 1), tuple(hd.dcoef), hd.drhs)

    return ParametricLP(
        program=system.program.base,
        hdep_eq=[conv(h) for h in system.hdep_eq],
        hdep_ub=[conv(h) for h in system.hdep_ub],
        m=len(system.index.phys) * N,
    )


@dataclass
class KktSystem:
    Q: sp.csr_matrix
    R: np.ndarray                 # (rows of Q, m) right-hand block
    n: int
    l1: int
    l2: int                       # inequality rows incl. expanded bounds
    k_active: int
    active_rows: np.ndarray
    z_col: int                    # column of dz in the unknown ordering


class MissingDualsError(ValueError):
    pass


def _expand_bounds(program: lp.LinearProgram, sol: lp.LPSolution):
    """Append both finite bound sides of every variable as inequality rows.

    Bound multipliers come from reduced costs: a variable at its lower bound
    carries mu_lo = max(d, 0) on the row -x <= -lo, at its upper bound
    mu_hi = max(-d, 0) on x <= hi.
    """
    n = program.n
    d = sol.reduced_costs
    lo_idx = np.nonzero(np.isfinite(program.lo))[0]
    hi_idx = np.nonzero(np.isfinite(program.hi))[0]
    at_lo = np.abs(sol.x - program.lo) <= 1e-7 * (1 + np.abs(program.lo))
    at_hi = np.abs(sol.x - np.where(np.isfinite(program.hi), program.hi, 0.0)) \
        <= 1e-7 * (1 + np.abs(np.where(np.isfinite(program.hi), program.hi, 0.0)))
    rows = []
    mus = []
    data, ri, ci = [], [], []
    r = 0
    for j in lo_idx:
        data.append(-1.0); ri.append(r); ci.append(j); r += 1
        rows.append(-program.lo[j])
        mus.append(max(d[j], 0.0) if at_lo[j] else 0.0)
    for j in hi_idx:
        data.append(1.0); ri.append(r); ci.append(j); r += 1
        rows.append(program.hi[j])
        mus.append(max(-d[j], 0.0) if at_hi[j] and np.isfinite(program.hi[j]) else 0.0)
    B = sp.csr_matrix((data, (ri, ci)), shape=(r, n))
    return B, np.asarray(rows), np.asarray(mus)


def assemble_kkt(sol: lp.LPSolution, plp: ParametricLP) -> KktSystem:
    """Build the block matrix and its parameter-derivative right-hand side."""
    if sol.status != lp.OPTIMAL or sol.duals_eq is None or sol.duals_ub is None:
        raise MissingDualsError("an optimal solution with duals is required")
    prog = plp.program
    n, l1 = prog.n, prog.n_eq
    Bmat, Brhs, Bmu = _expand_bounds(prog, sol)
    C_full = sp.vstack([prog.A_ub, Bmat], format="csr") if Bmat.shape[0] else prog.A_ub
    mu_full = np.concatenate([sol.duals_ub, Bmu])
    l2 = C_full.shape[0]
    active = np.nonzero(mu_full > lp.OPT_TOL)[0]
    k = active.size
    C_k = C_full[active]

    zeros = sp.csr_matrix
    row0 = sp.hstack([sp.csr_matrix(prog.c), zeros((1, l1)), zeros((1, l2)),
                      sp.csr_matrix(np.array([[-1.0]]))])
    row1 = sp.hstack([zeros((n, n)), prog.A_eq.T, C_full.T, zeros((n, 1))])
    row2 = sp.hstack([prog.A_eq, zeros((l1, l1)), zeros((l1, l2)), zeros((l1, 1))])
    row3 = sp.hstack([C_k, zeros((k, l1)), zeros((k, l2)), zeros((k, 1))])
    Q = sp.vstack([row0, row1, row2, row3], format="csr")

    m = plp.m
    R = np.zeros((1 + n + l1 + k, m))
    lam = sol.duals_eq
    # stationarity block: sum_i lam_i * dA_i + sum_j mu_j * dC_j
    for i, hd in enumerate(plp.hdep_eq):
        if hd is None:
            continue
        hcol, dcoefs, _dr = hd
        for col, dval in dcoefs:
            R[1 + col, hcol] += lam[i] * dval
    for jrow, hd in enumerate(plp.hdep_ub):
        if hd is None:
            continue
        hcol, dcoefs, _dr = hd
        for col, dval in dcoefs:
            R[1 + col, hcol] += sol.duals_ub[jrow] * dval
    # primal blocks: d(A x*) - dB on all equalities, d(C x*) - dD on actives
    x = sol.x
    for i, hd in enumerate(plp.hdep_eq):
        if hd is None:
            continue
        hcol, dcoefs, drhs = hd
        R[1 + n + i, hcol] += sum(dval * x[col] for col, dval in dcoefs) - drhs
    arow = {int(r): pos for pos, r in enumerate(active)}
    for jrow, hd in enumerate(plp.hdep_ub):
        if hd is None or jrow not in arow:
            continue
        hcol, dcoefs, drhs = hd
        R[1 + n + l1 + arow[jrow], hcol] += sum(dval * x[col] for col, dval in dcoefs) - drhs
    return KktSystem(Q=Q, R=R, n=n, l1=l1, l2=l2, k_active=k,
                     active_rows=active, z_col=n + l1 + l2)


@dataclass
class GradientReport:
    dz_dh: np.ndarray                  # per second of headway
    dz_dh_min: np.ndarray              # per minute of headway
    dx_dh: np.ndarray | None
    dlam_dh: np.ndarray | None
    dmu_dh: np.ndarray | None
    method: str
    conditioning: float
    notes: dict = field(default_factory=dict)


def gradient_ttt(kkt: KktSystem, want_blocks: bool | None = None) -> GradientReport:
    """Solve the differential KKT system for the objective sensitivity.

    Small systems take the dense generalized-inverse route and return the
    full dx/dlam/dmu blocks; large ones solve only the objective row through
    an iterative minimum-norm least-squares pass (identical dz by the
    transpose identity of the pseudo-inverse).
    """
    rows, cols = kkt.Q.shape
    dense = max(rows, cols) <= DENSE_LIMIT if want_blocks is None else want_blocks
    if dense:
        Qd = kkt.Q.toarray()
        U, s, Vt = np.linalg.svd(Qd, full_matrices=False)
        keep = s > SV_CUTOFF * (s[0] if s.size else 1.0)
        cond = float(s[0] / s[keep][-1]) if keep.any() else np.inf
        pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
        G = -pinv @ kkt.R
        n, l1, l2 = kkt.n, kkt.l1, kkt.l2
        dz_min = G[kkt.z_col]
        return GradientReport(
            dz_dh=dz_min / SECONDS_PER_MINUTE,
            dz_dh_min=dz_min,
            dx_dh=G[:n],
            dlam_dh=G[n:n + l1],
            dmu_dh=G[n + l1:n + l1 + l2],
            method="dense-svd",
            conditioning=cond,
            notes={"rank": int(np.sum(keep))},
        )
    # Large systems: dx is constrained only by the primal rows [A; C_K]
    # (the stationarity block carries no dx columns), and dz = P'dx from the
    # objective row.  Solve the primal block in minimum-norm least-squares
    # sense per parameter column; dz agrees with the full generalized
    # inverse whenever dx is determined, which is the differentiable case.
    n, l1 = kkt.n, kkt.l1
    P_row = np.asarray(kkt.Q[0, :n].todense()).ravel()
    A_block = kkt.Q[1 + n:, :n].tocsr()
    rhs = -kkt.R[1 + n:, :]
    m = kkt.R.shape[1]
    dz_min = np.zeros(m)
    worst_cond = 0.0
    istops = set()
    nonzero_cols = np.nonzero(np.any(rhs != 0.0, axis=0))[0]
    for q in nonzero_cols:
        out = lsmr(A_block, rhs[:, q], atol=1e-13, btol=1e-13, conlim=1e16,
                   maxiter=6 * max(A_block.shape))
        dx = out[0]
        worst_cond = max(worst_cond, float(out[6]))
        istops.add(int(out[1]))
        dz_min[q] = float(P_row @ dx)
    return GradientReport(
        dz_dh=dz_min / SECONDS_PER_MINUTE,
        dz_dh_min=dz_min,
        dx_dh=None, dlam_dh=None, dmu_dh=None,
        method="lsmr-primal-block",
        conditioning=worst_cond,
        notes={"lsmr_istops": sorted(istops)},
    )


def gradient_at(network: Network, gparams: GlobalParams, demand: DemandProfile,
                h, delta: np.ndarray, engine=None):
    """Convenience: assemble the frozen-regime LP at h, solve, differentiate.

    Returns (gradient report, lp solution, system).
    """
    system = sodta.build_constraints(network, gparams, demand, h, fixed_delta=delta)
    sol = lp.solve_lp(system.program.base, engine=engine)
    if sol.status != lp.OPTIMAL:
        raise MissingDualsError(f"frozen-regime LP is {sol.status}")
    kkt = assemble_kkt(sol, from_system(system))
    return gradient_ttt(kkt), sol, system


@dataclass
class DescentTrace:
    rows: list          # dicts: iteration, ttt, grad_inf, step, accepted
    h_trace: list       # headway fields (seconds) per iteration
    final_h: np.ndarray
    final_ttt: float
    status: str


def sensitivity_descent(
    network: Network,
    gparams: GlobalParams,
    demand: DemandProfile,
    h0,
    eta: float,
    iters: int,
    backtracking: bool = True,
    engine=None,
    node_limit: int = 20000,
) -> DescentTrace:
    """Projected gradient descent of TTT over the headway box.

    Each step re-solves the mixed program at the current field, freezes the
    regime pattern, differentiates the KKT system and moves against the
    gradient, clamping into [h_min, h_max].  `eta` acts on headways in
    seconds.  With backtracking enabled a step that increases TTT is halved
    up to three times and otherwise rejected (the trace records which);
    without it the raw update is always taken.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    h = sodta.headway_array(h0, network, gparams)
    phys = network.physical_links
    h_lo = np.array([[l.params.h_min_s] * gparams.n_intervals for l in phys])
    h_hi = np.array([[l.params.h_max_s] * gparams.n_intervals for l in phys])

    rows, h_trace = [], []
    status = "ok"
    current = None
    for it in range(iters):
        try:
            if current is None:
                current = sodta.solve_fixed_headway(
                    network, gparams, demand, h, node_limit=node_limit, engine=engine)
        except sodta.InfeasibleProblemError as exc:
            status = f"solve-failed: {exc}"
            break
        delta = current.state.delta[:, 1:]
        grad, _sol, _sys = gradient_at(network, gparams, demand, h, delta, engine=engine)
        g = grad.dz_dh.reshape(h.shape)
        rows.append({"iteration": it, "ttt": current.ttt,
                     "grad_inf": float(np.max(np.abs(g))), "step": eta,
                     "accepted": True})
        h_trace.append(h.copy())
        step = eta
        accepted = False
        for _half in range(4):
            h_new = np.clip(h - step * g, h_lo, h_hi)
            if np.max(np.abs(h_new - h)) < 1e-12:
                break
            try:
                cand = sodta.solve_fixed_headway(
                    network, gparams, demand, h_new, node_limit=node_limit, engine=engine)
            except sodta.InfeasibleProblemError:
                step /= 2
                continue
            if (not backtracking) or cand.ttt <= current.ttt * (1 + 1e-12):
                h, current, accepted = h_new, cand, True
                break
            step /= 2
        rows[-1]["step"] = step
        rows[-1]["accepted"] = accepted
        if not accepted:
            break
    final_ttt = current.ttt if current is not None else float("nan")
    return DescentTrace(rows=rows, h_trace=h_trace, final_h=h, final_ttt=final_ttt,
                        status=status)
