"""Maximin headway: the largest headway field preserving the SO-DTA optimum.

Given an optimal traffic state solved under the minimum headway, each
(link, interval) cell can relax its headway independently as long as the
state stays feasible:

* congested cells are pinned at the original headway (the congested-branch
  flow equality involves h directly),
* free cells may grow h until the critical density would drop onto the
  observed density (breakpoint bound, vacuous on empty cells), or until the
  shockwave step count would shift an upstream-queue reference into a part
  of the boundary-flow history that actually differs (shockwave bound), or
  until the headway cap.

The shockwave bound uses the largest admissible step count: moving the
reference from F(k - n) to F(k - n') changes nothing where the cumulative
boundary-flow curve is flat, so idle cells and fully unused links relax all
the way to the cap while cells in moving traffic keep the strict one-band
bound.  The resulting program is separable per cell; the closed form is the
mode of record and an LP assembled from the raw inequalities serves as a
cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hfd, lp, sodta
from .network import GlobalParams, Network
from .units import headway_min_to_s, headway_s_to_min

EPS_REL = 1e-6     # strict-inequality margin, relative
NUDGE = 1e-9       # extra relative backoff against float rounding

TAG_CONGESTED = "congested-pinned"
TAG_BREAKPOINT = "fd-breakpoint"
TAG_SHOCKWAVE = "shockwave-upper"
TAG_HMAX = "h_max"


@dataclass
class HeadwayField:
    """Per physical link, per interval headways in seconds."""

    values_s: np.ndarray            # (n_phys, N)
    link_ids: list = field(default_factory=list)

    @staticmethod
    def uniform(network: Network, gparams: GlobalParams, value_s: float) -> "HeadwayField":
        phys = network.physical_links
        return HeadwayField(np.full((len(phys), gparams.n_intervals), float(value_s)),
                            [l.id for l in phys])

    @staticmethod
    def minimum(network: Network, gparams: GlobalParams) -> "HeadwayField":
        phys = network.physical_links
        vals = np.array([[l.params.h_min_s] * gparams.n_intervals for l in phys])
        return HeadwayField(vals, [l.id for l in phys])

    @staticmethod
    def maximum(network: Network, gparams: GlobalParams) -> "HeadwayField":
        phys = network.physical_links
        vals = np.array([[l.params.h_max_s] * gparams.n_intervals for l in phys])
        return HeadwayField(vals, [l.id for l in phys])

    @property
    def l1_norm(self) -> float:
        return float(np.sum(self.values_s))

    def per_link_mean(self) -> np.ndarray:
        return self.values_s.mean(axis=1)


@dataclass
class MaximinReport:
    h_star: HeadwayField
    binding: np.ndarray              # (n_phys, N) of tag strings
    l1_norm: float
    mean_ratio: float
    mean_gap_s: float
    objective: float                 # weighted sum of h_star (seconds)
    per_link: list                   # dicts: link, name, mean h_min, mean h*
    lp_agrees: bool | None = None


class StateRejectedError(ValueError):
    """The provided state fails its own constraint replay."""


def _cumulative_per_dest(state: sodta.TrafficState, li: int, dt: float) -> np.ndarray:
    """F_s curves, shape (n_dests, N+1)."""
    f = state.per["f_s"][li]
    return np.concatenate([np.zeros((f.shape[0], 1)), np.cumsum(f[:, 1:], axis=1) * dt], axis=1)


def maximin_headway(
    state: sodta.TrafficState,
    network: Network,
    gparams: GlobalParams,
    weights: np.ndarray | None = None,
    lp_cross_check: bool = False,
    residual_tol: float = 1e-6,
) -> MaximinReport:
    """Per-cell largest headway keeping the given optimal state feasible.

    `weights` (positive, same shape as the field) only reweight the reported
    objective; with a separable feasible box the argmax per cell does not
    depend on positive weights.
    """
    system = state.system
    res = sodta.residual_report(system, state.x, state)
    if max(res.values()) > residual_tol:
        raise StateRejectedError(
            f"state residuals too large for maximin extraction: {max(res.values()):.3g}")

    idx = system.index
    N = idx.N
    dt = gparams.dt_min
    L = gparams.veh_len_km
    phys = idx.phys
    h_min = np.array([[l.params.h_min_s] * N for l in phys])
    if weights is None:
        weights = np.ones((len(phys), N))
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(phys), N) or np.any(weights <= 0):
            raise ValueError("weights must be positive with shape (n_phys, N)")

    h_star = np.zeros((len(phys), N))
    binding = np.empty((len(phys), N), dtype=object)
    raw_rows = []   # for the LP cross-check: (p, k, list of (coef, rhs) on h minutes)

    for p, l in enumerate(phys):
        li = state.link_pos[l.id]
        v_f = l.params.free_flow_speed
        length = l.params.length_km
        Fs = _cumulative_per_dest(state, li, dt)
        h_max_s = l.params.h_max_s
        nw_cap = hfd.shockwave_steps(h_max_s, dt, L, length)
        for k in range(1, N + 1):
            if state.delta[p, k] == 1:
                h_star[p, k - 1] = system.h_s[p, k - 1]
                binding[p, k - 1] = TAG_CONGESTED
                continue
            rho = state.agg["rho"][li, k]
            cands = [(h_max_s, TAG_HMAX)]
            rows = []
            if rho > 1e-12:
                bp_min = ((1 - EPS_REL) - rho * L) / (rho * v_f) * (1 - NUDGE)
                cands.append((headway_min_to_s(bp_min), TAG_BREAKPOINT))
                rows.append((rho * v_f, (1 - EPS_REL) * (1 - rho * L / (1 - EPS_REL))))
            n_star = int(state.n_w[p, k])
            n_eff = n_star
            for n in range(n_star + 1, nw_cap + 1):
                ref_new = Fs[:, k - n] if k - n >= 1 else np.zeros(Fs.shape[0])
                ref_old = Fs[:, k - n_star] if k - n_star >= 1 else np.zeros(Fs.shape[0])
                if np.max(np.abs(ref_new - ref_old)) <= 1e-9 * (1 + np.max(np.abs(ref_old))):
                    n_eff = n
                else:
                    break
            if n_eff < nw_cap:
                sw_min = dt * L * (n_eff + 1) / length * (1 - EPS_REL)
                cands.append((headway_min_to_s(sw_min), TAG_SHOCKWAVE))
                rows.append((length / (dt * L * (n_eff + 1)), 1 - EPS_REL))
            h_val, tag = min(cands, key=lambda c: c[0])
            lo_clamp = max(l.params.h_min_s,
                           headway_min_to_s(dt * L * n_star / length))
            if h_val < lo_clamp:
                h_val, tag = lo_clamp, TAG_SHOCKWAVE
            h_star[p, k - 1] = h_val
            binding[p, k - 1] = tag
            raw_rows.append((p, k, rows))

    report = MaximinReport(
        h_star=HeadwayField(h_star, [l.id for l in phys]),
        binding=binding,
        l1_norm=float(np.sum(h_star)),
        mean_ratio=float(np.mean(h_star / h_min)),
        mean_gap_s=float(np.sum(np.abs(h_star - h_min)) / h_star.size),
        objective=float(np.sum(weights * h_star)),
        per_link=[{
            "link": l.id,
            "name": l.name,
            "h_min_s": float(h_min[p].mean()),
            "h_star_mean_s": float(h_star[p].mean()),
        } for p, l in enumerate(phys)],
    )
    if lp_cross_check:
        report.lp_agrees = _lp_cross_check(state, network, gparams, weights, h_star, raw_rows)
    return report


def _lp_cross_check(state, network, gparams, weights, h_star_s, raw_rows) -> bool:
    """Assemble the separable maximin program and solve it with the LP core.

    One variable per free cell (headway in minutes), upper-bounded by the
    raw breakpoint/shockwave inequalities; congested cells are fixed.  The
    optimum must match the closed form elementwise.
    """
    idx = state.system.index
    N = idx.N
    phys = idx.phys
    cells = [(p, k) for (p, k, _rows) in raw_rows]
    pos = {cell: i for i, cell in enumerate(cells)}
    n = len(cells)
    if n == 0:
        return True
    c = np.zeros(n)
    lo = np.zeros(n)
    hi = np.zeros(n)
    rows_A, rows_b = [], []
    for (p, k, rows) in raw_rows:
        i = pos[(p, k)]
        l = phys[p]
        c[i] = -weights[p, k - 1]
        lo[i] = headway_s_to_min(l.params.h_min_s)
        hi[i] = headway_s_to_min(l.params.h_max_s)
        for coef, rhs in rows:
            a = np.zeros(n)
            a[i] = coef
            rows_A.append(a)
            rows_b.append(rhs)
    prog = lp.LinearProgram.build(
        c, A_ub=np.asarray(rows_A) if rows_A else None,
        b_ub=np.asarray(rows_b) if rows_b else None, lo=lo, hi=hi)
    sol = lp.solve_lp(prog)
    if sol.status != lp.OPTIMAL:
        return False
    ok = True
    for (p, k) in cells:
        got = headway_min_to_s(sol.x[pos[(p, k)]])
        want = h_star_s[p, k - 1]
        if abs(got - want) > 5e-6 * (1 + abs(want)):
            ok = False
    return ok


@dataclass
class VerifyResult:
    ok: bool
    ttt_original: float
    ttt_resolved: float
    replay_max_residual: float
    violations: list
    report: dict


def verify_optimality_preserved(
    h_star: HeadwayField,
    network: Network,
    gparams: GlobalParams,
    demand,
    ttt_star: float,
    state: sodta.TrafficState,
    tol_rel: float = 1e-6,
    engine=None,
) -> VerifyResult:
    """Check that the maximin field keeps both the state and the optimum.

    Replays the original optimal state under the new headway field (every
    constraint re-evaluated with the new critical densities and shockwave
    counts) and re-solves the SO-DTA program at the new field, asserting the
    total travel time is unchanged.
    """
    system_new = sodta.build_constraints(network, gparams, demand, h_star)
    res = sodta.residual_report(system_new, state.x)
    max_res = max(res.values())
    violations = [{"eq": eq, "violation": v} for eq, v in res.items() if v > 1e-6]

    solve_new = sodta.solve_fixed_headway(
        network, gparams, demand, h_star, incumbent_hint=state.x, engine=engine)
    ttt_new = solve_new.ttt
    ok = (max_res <= 1e-6) and abs(ttt_new - ttt_star) <= tol_rel * max(1.0, abs(ttt_star))
    return VerifyResult(
        ok=ok,
        ttt_original=ttt_star,
        ttt_resolved=ttt_new,
        replay_max_residual=max_res,
        violations=violations,
        report={
            "ttt_gap": abs(ttt_new - ttt_star),
            "resolve_nodes": solve_new.report.get("nodes"),
            "residuals": res,
        },
    )


def headway_gap_stats(h_star: HeadwayField, h_min_field: HeadwayField) -> tuple[float, float]:
    """Mean elementwise gap (seconds) and mean ratio against the base field."""
    a, b = h_star.values_s, h_min_field.values_s
    if a.shape != b.shape:
        raise ValueError("headway fields are not congruent")
    mean_gap = float(np.sum(np.abs(a - b)) / a.size)
    return mean_gap, float(np.mean(a / b))
