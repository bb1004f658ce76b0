"""Discretized system-optimal DTA under a fixed headway field.

For an exogenous headway field h the traffic dynamics form a mixed integer
linear program: binary regime flags select the free or congested branch of
the headway-dependent fundamental diagram per link and interval, and all
other constraints (density recursion, queue definitions through cumulative
flows, aggregation over destinations, capacities, node conservation,
initial/end conditions, demand loading) are linear.

Variable layout per link and interval: aggregate rho, u, f, v, qD, qU plus,
per destination, rho_s, u_s, f_s, v_s, qD_s, qU_s and cumulative helpers
U_s, F_s, V_s; one regime binary per physical link and interval.  Row and
column counts therefore follow

    n  = |E|*N*(6 + 9*|S|) + |Ep|*N                      (+delta columns)
    l1 = |E|*|S|*N*5 + |Ep|*|S|*N + |E|*N*6 + |Vp|*|S|*N
         + |Lr|*|S|*N*2 + |Ls|*|S|*N*2 + |E|*|S|
    l2 = |Ep|*N*7 + |Ep|*N*4 (finite caps only) + |Ep|

with Ep the physical links, Vp the physical nodes, Lr/Ls the connectors.

Every row carries a provenance tag naming its source equation and cell;
rows whose coefficients or right-hand side depend on the cell's headway
also carry the analytic derivative, which feeds the sensitivity module.

Regime linearization (h in minutes, L the vehicle length, rho_c the
critical density 1/(h*v_f+L), strictness eps = 1e-6 relative):

    fd-free-density   rho - (1/L) d           <= rho_c(1-eps)
    fd-free-flow-lb   v_f rho - f - M_f d     <= 0      M_f = v_f/L + v_f rho_c
    fd-flow-ub        f - v_f rho             <= 0      (valid in both regimes)
    fd-cong-density   rho_c d - rho           <= 0
    fd-cong-flow-ub   h f + L rho + d         <= 2
    fd-cong-flow-lb   -h f - L rho + d        <= 0
    fd-envelope       f                       <= v_f rho_c   (both regimes)

The envelope row is implied for integral d and tightens the relaxation to
the concave upper envelope of the diagram.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import hfd, lp
from .network import UNBOUNDED, DemandProfile, GlobalParams, Network
from .units import headway_s_to_min

#: provenance tags that do not map to a numbered model equation: connector
#: pass-through rows (destination connectors forward flow instantly).
CONNECTOR_TAG = "conn-pass"

EQ_TAGS = {
    "eq25", "eq26", "eq27", "eq30", "eq31", "eq32", "eq33", "eq34", "eq35",
    "eq36", "eq39", "eq40", "eq41", "eq42", "eq43", CONNECTOR_TAG,
}

AGG_KINDS = ("rho", "u", "f", "v", "qD", "qU")
DEST_KINDS = ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s", "U_s", "F_s", "V_s")


class HeadwayBoundsError(ValueError):
    """Headway field outside the per-link [h_min, h_max] box."""


class NetworkInvalidError(ValueError):
    def __init__(self, violations):
        super().__init__("; ".join(v.message for v in violations))
        self.violations = violations


def headway_array(h, network: Network, gparams: GlobalParams) -> np.ndarray:
    """Coerce a headway input to an (n_physical_links, N) array of seconds.

    Accepts a scalar (uniform field), an array, or any object with a
    `values_s` attribute.
    """
    n_phys = len(network.physical_links)
    vals = getattr(h, "values_s", h)
    arr = np.asarray(vals, dtype=float)
    if arr.ndim == 0:
        arr = np.full((n_phys, gparams.n_intervals), float(arr))
    if arr.shape != (n_phys, gparams.n_intervals):
        raise ValueError(
            f"headway field shape {arr.shape}, expected {(n_phys, gparams.n_intervals)}")
    return arr


@dataclass(frozen=True)
class RowTag:
    eq: str
    part: str = ""
    link: int | None = None
    dest: int | None = None
    k: int | None = None


@dataclass(frozen=True)
class HDep:
    """Analytic h-derivative of one row w.r.t. its own cell's headway (minutes).

    dcoef: list of (column, d coefficient / d h); drhs: d rhs / d h.
    """
    cell: tuple[int, int]          # (physical link position, k)
    dcoef: tuple = ()
    drhs: float = 0.0


class VariableIndex:
    """Flat positions for every model variable."""

    def __init__(self, network: Network, gparams: GlobalParams, with_delta=True):
        self.network = network
        self.gparams = gparams
        self.links = list(network.links)
        self.link_pos = {l.id: i for i, l in enumerate(self.links)}
        self.phys = [l for l in self.links if not l.is_connector]
        self.phys_pos = {l.id: i for i, l in enumerate(self.phys)}
        self.dests = network.destinations
        self.N = gparams.n_intervals
        self.with_delta = with_delta
        self._ix: dict = {}
        pos = 0
        for l in self.links:
            for k in range(1, self.N + 1):
                for kind in AGG_KINDS:
                    self._ix[(kind, l.id, None, k)] = pos
                    pos += 1
                for s in self.dests:
                    for kind in DEST_KINDS:
                        self._ix[(kind, l.id, s, k)] = pos
                        pos += 1
        self.delta0 = pos
        if with_delta:
            for l in self.phys:
                for k in range(1, self.N + 1):
                    self._ix[("delta", l.id, None, k)] = pos
                    pos += 1
        self.n = pos

    def ix(self, kind, link_id, *args):
        """ix(kind, link, k) for aggregates, ix(kind, link, dest, k) per
        destination."""
        if len(args) == 1:
            return self._ix[(kind, link_id, None, args[0])]
        dest, k = args
        return self._ix[(kind, link_id, dest, k)]

    def delta_columns(self) -> np.ndarray:
        if not self.with_delta:
            return np.zeros(0, dtype=int)
        return np.arange(self.delta0, self.n)

    def describe(self, col) -> tuple:
        for key, p in self._ix.items():
            if p == col:
                return key
        raise KeyError(col)


@dataclass
class ConstraintSystem:
    program: lp.MixedProgram
    index: VariableIndex
    tags_eq: list
    tags_ub: list
    hdep_eq: list
    hdep_ub: list
    network: Network
    gparams: GlobalParams
    demand: DemandProfile
    h_s: np.ndarray                 # (n_phys, N) seconds
    n_w: np.ndarray                 # (n_phys, N) ints
    fixed_delta: np.ndarray | None  # None => delta are binary columns
    meta: dict = field(default_factory=dict)

    @property
    def n_rows_eq(self):
        return len(self.tags_eq)

    @property
    def n_rows_ub(self):
        return len(self.tags_ub)


class _Assembler:
    def __init__(self, index: VariableIndex):
        self.index = index
        self.eq_rows = []   # (coef list, rhs, tag, hdep)
        self.ub_rows = []

    def eq(self, coefs, rhs, tag, hdep=None):
        self.eq_rows.append((coefs, rhs, tag, hdep))

    def ub(self, coefs, rhs, tag, hdep=None):
        self.ub_rows.append((coefs, rhs, tag, hdep))

    def matrices(self, n):
        def build(rows):
            data, ri, ci, rhs = [], [], [], []
            for r, (coefs, b, _tag, _h) in enumerate(rows):
                for col, v in coefs:
                    if v != 0.0:
                        ri.append(r)
                        ci.append(col)
                        data.append(v)
                rhs.append(b)
            A = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
            return A, np.asarray(rhs, dtype=float)
        A_eq, b_eq = build(self.eq_rows)
        A_ub, b_ub = build(self.ub_rows)
        return A_eq, b_eq, A_ub, b_ub


def build_constraints(
    network: Network,
    gparams: GlobalParams,
    demand: DemandProfile,
    h,
    fixed_delta: np.ndarray | None = None,
) -> ConstraintSystem:
    """Assemble the program for headway field `h` (seconds).

    With `fixed_delta` the regime binaries are folded into the right-hand
    sides and the result is a pure LP (used by the sensitivity analysis and
    by feasibility replays at a known regime pattern).
    """
    from .network import validate

    viol = validate(network, gparams)
    if viol:
        raise NetworkInvalidError(viol)
    h_s = headway_array(h, network, gparams)
    idx = VariableIndex(network, gparams, with_delta=fixed_delta is None)
    N, L = idx.N, gparams.veh_len_km
    dt = gparams.dt_min
    dests = idx.dests
    n1 = gparams.n_demand

    for p, l in enumerate(idx.phys):
        if np.any(h_s[p] < l.params.h_min_s - 1e-12) or np.any(h_s[p] > l.params.h_max_s + 1e-12):
            raise HeadwayBoundsError(
                f"headway on link {l.name} outside [{l.params.h_min_s}, {l.params.h_max_s}] s")

    n_w = np.zeros((len(idx.phys), N), dtype=int)
    for p, l in enumerate(idx.phys):
        for k in range(1, N + 1):
            n_w[p, k - 1] = hfd.shockwave_steps(
                h_s[p, k - 1], dt, L, l.params.length_km)

    if fixed_delta is not None:
        fixed_delta = np.asarray(fixed_delta, dtype=float)
        if fixed_delta.shape != (len(idx.phys), N):
            raise ValueError("fixed_delta must be (n_physical_links, N)")

    asm = _Assembler(idx)
    ix = idx.ix
    reach = {s: network.reachable_to(s) for s in dests}
    origin_of = {r: network.connector_of_origin(r) for r in sorted(network.dummy_origins)}

    lo = np.zeros(idx.n)
    hi = np.full(idx.n, np.inf)
    jam = 1.0 / L

    for l in idx.links:
        conn = l.is_connector
        nw_row = None if conn else n_w[idx.phys_pos[l.id]]
        for k in range(1, N + 1):
            if not conn:
                hi[ix("rho", l.id, k)] = jam
            else:
                hi[ix("rho", l.id, k)] = 0.0
            for s in dests:
                # destination filtering: traffic bound for s may only use
                # links whose head can still reach s
                if l.head not in reach[s]:
                    for kind in DEST_KINDS:
                        hi[ix(kind, l.id, s, k)] = 0.0
                if conn:
                    hi[ix("rho_s", l.id, s, k)] = 0.0
                # cumulative definitions
                for cum, flow_kind, tag in (("U_s", "u_s", "eq31"),
                                            ("F_s", "f_s", "eq30"),
                                            ("V_s", "v_s", "eq30")):
                    coefs = [(ix(cum, l.id, s, k), 1.0), (ix(flow_kind, l.id, s, k), -dt)]
                    if k > 1:
                        coefs.append((ix(cum, l.id, s, k - 1), -1.0))
                    asm.eq(coefs, 0.0, RowTag(tag, "cum-" + flow_kind, l.id, s, k))
                # downstream queue: qD_s = F_s - V_s   (qD_s(0) = 0)
                asm.eq([(ix("qD_s", l.id, s, k), 1.0),
                        (ix("F_s", l.id, s, k), -1.0),
                        (ix("V_s", l.id, s, k), 1.0)],
                       0.0, RowTag("eq30", "queue", l.id, s, k))
                # upstream queue: qU_s = U_s - F_s(k - n_w); F_s(j<=0) = 0
                shift = 0 if conn else int(nw_row[k - 1])
                coefs = [(ix("qU_s", l.id, s, k), 1.0), (ix("U_s", l.id, s, k), -1.0)]
                if k - shift >= 1:
                    coefs.append((ix("F_s", l.id, s, k - shift), 1.0))
                asm.eq(coefs, 0.0, RowTag("eq31", "queue", l.id, s, k))
                if not conn:
                    # density recursion
                    coefs = [(ix("rho_s", l.id, s, k), 1.0),
                             (ix("u_s", l.id, s, k), -dt / l.params.length_km),
                             (ix("f_s", l.id, s, k), dt / l.params.length_km)]
                    if k > 1:
                        coefs.append((ix("rho_s", l.id, s, k - 1), -1.0))
                    asm.eq(coefs, 0.0, RowTag("eq27", "", l.id, s, k))
            # aggregation identities
            for agg, per in (("rho", "rho_s"), ("qD", "qD_s"), ("qU", "qU_s")):
                coefs = [(ix(agg, l.id, k), 1.0)] + [(ix(per, l.id, s, k), -1.0) for s in dests]
                asm.eq(coefs, 0.0, RowTag("eq32", agg, l.id, None, k))
            for agg, per in (("u", "u_s"), ("f", "f_s"), ("v", "v_s")):
                coefs = [(ix(agg, l.id, k), 1.0)] + [(ix(per, l.id, s, k), -1.0) for s in dests]
                asm.eq(coefs, 0.0, RowTag("eq33", agg, l.id, None, k))

    # fundamental-diagram rows and capacities on physical links
    for p, l in enumerate(idx.phys):
        v_f = l.params.free_flow_speed
        M_rho = jam
        for k in range(1, N + 1):
            hm = headway_s_to_min(h_s[p, k - 1])
            rho_c = 1.0 / (hm * v_f + L)
            drho_c = -v_f * rho_c * rho_c
            eps = 1e-6
            rho_c_eps = rho_c * (1 - eps)
            M_f = v_f / L + v_f * rho_c
            dM_f = v_f * drho_c
            cell = (p, k)
            c_rho = ix("rho", l.id, k)
            c_f = ix("f", l.id, k)

            def delta_term(coef):
                """(coefs to append, rhs shift) for a `coef * delta` term."""
                if fixed_delta is None:
                    return [(ix("delta", l.id, k), coef)], 0.0
                return [], -coef * fixed_delta[p, k - 1]

            dcoefs, dshift = delta_term(-M_rho)
            asm.ub([(c_rho, 1.0)] + dcoefs, rho_c_eps + dshift,
                   RowTag("eq25", "free-density", l.id, None, k),
                   HDep(cell, drhs=(1 - eps) * drho_c))
            dcoefs, dshift = delta_term(-M_f)
            if fixed_delta is None:
                hd = HDep(cell, dcoef=((ix("delta", l.id, k), -dM_f),))
            else:
                hd = HDep(cell, drhs=dM_f * fixed_delta[p, k - 1])
            asm.ub([(c_rho, v_f), (c_f, -1.0)] + dcoefs, 0.0 + dshift,
                   RowTag("eq25", "free-flow-lb", l.id, None, k), hd)
            asm.ub([(c_f, 1.0), (c_rho, -v_f)], 0.0,
                   RowTag("eq25", "flow-ub", l.id, None, k))
            if fixed_delta is None:
                asm.ub([(ix("delta", l.id, k), rho_c), (c_rho, -1.0)], 0.0,
                       RowTag("eq26", "cong-density", l.id, None, k),
                       HDep(cell, dcoef=((ix("delta", l.id, k), drho_c),)))
            else:
                d_val = fixed_delta[p, k - 1]
                asm.ub([(c_rho, -1.0)], -rho_c * d_val,
                       RowTag("eq26", "cong-density", l.id, None, k),
                       HDep(cell, drhs=-drho_c * d_val))
            dcoefs, dshift = delta_term(1.0)
            asm.ub([(c_f, hm), (c_rho, L)] + dcoefs, 2.0 + dshift,
                   RowTag("eq26", "cong-flow-ub", l.id, None, k),
                   HDep(cell, dcoef=((c_f, 1.0),)))
            asm.ub([(c_f, -hm), (c_rho, -L)] + dcoefs, 0.0 + dshift,
                   RowTag("eq26", "cong-flow-lb", l.id, None, k),
                   HDep(cell, dcoef=((c_f, -1.0),)))
            asm.ub([(c_f, 1.0)], v_f * rho_c,
                   RowTag("eq25", "envelope", l.id, None, k),
                   HDep(cell, drhs=v_f * drho_c))
            # capacity rows
            caps = (("qD", l.params.q_down_cap, "eq34", "down-queue-cap"),
                    ("qU", l.params.q_up_cap, "eq34", "up-queue-cap"),
                    ("u", l.params.inflow_cap, "eq35", "inflow-cap"),
                    ("v", l.params.outflow_cap, "eq35", "outflow-cap"))
            for kind, cap, eqtag, part in caps:
                if cap != UNBOUNDED:
                    asm.ub([(ix(kind, l.id, k), 1.0)], float(cap),
                           RowTag(eqtag, part, l.id, None, k))

    # node conservation
    for node in network.physical_nodes:
        ins = network.in_links(node)
        outs = network.out_links(node)
        for s in dests:
            for k in range(1, N + 1):
                coefs = [(ix("v_s", l.id, s, k), 1.0) for l in ins]
                coefs += [(ix("u_s", l.id, s, k), -1.0) for l in outs]
                asm.eq(coefs, 0.0, RowTag("eq36", "", None, s, k))

    # demand loading at origin connectors: boundary flow carries the demand
    # straight into the waiting buffer; the flow area is a pass-through
    for r in sorted(network.dummy_origins):
        conn = origin_of[r]
        for s in dests:
            for k in range(1, N + 1):
                d = demand.rate((r, s), k) if k <= n1 else 0.0
                asm.eq([(ix("f_s", conn.id, s, k), 1.0)], d,
                       RowTag("eq42", "boundary", conn.id, s, k))
                asm.eq([(ix("u_s", conn.id, s, k), 1.0)], d,
                       RowTag("eq42", "inflow", conn.id, s, k))

    # destination connectors forward instantly: f = u, v = f
    for sdum in sorted(network.dummy_destinations):
        conn = network.connector_of_destination(sdum)
        for s in dests:
            for k in range(1, N + 1):
                asm.eq([(ix("f_s", conn.id, s, k), 1.0), (ix("u_s", conn.id, s, k), -1.0)],
                       0.0, RowTag(CONNECTOR_TAG, "boundary", conn.id, s, k))
                asm.eq([(ix("v_s", conn.id, s, k), 1.0), (ix("f_s", conn.id, s, k), -1.0)],
                       0.0, RowTag(CONNECTOR_TAG, "outflow", conn.id, s, k))

    # end conditions: buffers empty, flow areas below one vehicle
    for l in idx.links:
        for s in dests:
            asm.eq([(ix("qD_s", l.id, s, N), 1.0)], 0.0,
                   RowTag("eq41", "queue", l.id, s, N))
    for l in idx.phys:
        asm.ub([(ix("rho", l.id, N), 1.0)], 1.0 / (gparams.end_c * l.params.length_km),
               RowTag("eq41", "density", l.id, None, N))

    # objective: cumulative released-minus-arrived plus origin waiting
    c = np.zeros(idx.n)
    for r in sorted(network.dummy_origins):
        conn = origin_of[r]
        for k in range(1, N + 1):
            c[ix("v", conn.id, k)] += dt * dt * (N - k + 1)
            for s in dests:
                c[ix("qD_s", conn.id, s, k)] += dt
    for sdum in sorted(network.dummy_destinations):
        conn = network.connector_of_destination(sdum)
        for k in range(1, N + 1):
            c[ix("u", conn.id, k)] -= dt * dt * (N - k + 1)

    if fixed_delta is None:
        for col in idx.delta_columns():
            lo[col], hi[col] = 0.0, 1.0

    A_eq, b_eq, A_ub, b_ub = asm.matrices(idx.n)
    program = lp.MixedProgram(
        lp.LinearProgram(c, A_eq, b_eq, A_ub, b_ub, lo, hi),
        idx.delta_columns(),
    )
    return ConstraintSystem(
        program=program,
        index=idx,
        tags_eq=[r[2] for r in asm.eq_rows],
        tags_ub=[r[2] for r in asm.ub_rows],
        hdep_eq=[r[3] for r in asm.eq_rows],
        hdep_ub=[r[3] for r in asm.ub_rows],
        network=network,
        gparams=gparams,
        demand=demand,
        h_s=h_s,
        n_w=n_w,
        fixed_delta=fixed_delta,
        meta={"veh_len_km": gparams.veh_len_km},
    )


# ---------------------------------------------------------------------------
# traffic state


class TrafficState:
    """Dense view of a solution vector, indexed (link, destination, interval).

    Arrays carry a leading k=0 column holding the (zero) initial state, so
    `rho[l, k]` is the density at the end of interval k.  `delta` and `n_w`
    are per physical link.
    """

    def __init__(self, system: ConstraintSystem, x: np.ndarray):
        idx = system.index
        N = idx.N
        nl, nd = len(idx.links), len(idx.dests)
        self.system = system
        self.x = np.asarray(x, dtype=float)
        self.links = idx.links
        self.dests = idx.dests
        self.link_pos = idx.link_pos
        self.agg = {kind: np.zeros((nl, N + 1)) for kind in AGG_KINDS}
        self.per = {kind: np.zeros((nl, nd, N + 1)) for kind in DEST_KINDS}
        for li, l in enumerate(idx.links):
            for k in range(1, N + 1):
                for kind in AGG_KINDS:
                    self.agg[kind][li, k] = x[idx.ix(kind, l.id, k)]
                for si, s in enumerate(idx.dests):
                    for kind in DEST_KINDS:
                        self.per[kind][li, si, k] = x[idx.ix(kind, l.id, s, k)]
        n_phys = len(idx.phys)
        self.delta = np.zeros((n_phys, N + 1))
        if system.fixed_delta is None:
            for p, l in enumerate(idx.phys):
                for k in range(1, N + 1):
                    self.delta[p, k] = np.round(x[idx.ix("delta", l.id, k)])
        else:
            self.delta[:, 1:] = system.fixed_delta
        self.n_w = np.zeros((n_phys, N + 1), dtype=int)
        self.n_w[:, 1:] = system.n_w

    @property
    def n_intervals(self):
        return self.system.index.N

    def a(self, kind, link_id, k):
        return float(self.agg[kind][self.link_pos[link_id], k])

    def s(self, kind, link_id, dest, k):
        si = self.dests.index(dest)
        return float(self.per[kind][self.link_pos[link_id], si, k])

    def delta_of(self, link_id, k):
        return int(self.delta[self.system.index.phys_pos[link_id], k])

    def vehicles_on_link(self, link_id, k):
        """Flow-area plus buffer content, length*rho + qD."""
        li = self.link_pos[link_id]
        length = self.links[li].params.length_km
        return length * self.agg["rho"][li, k] + self.agg["qD"][li, k]

    def to_trajectory_rows(self):
        """One row per (link, destination, interval) with all state fields."""
        rows = []
        for li, l in enumerate(self.links):
            for si, s in enumerate(self.dests):
                for k in range(1, self.n_intervals + 1):
                    rows.append({
                        "link": l.id, "tail": l.tail, "head": l.head,
                        "destination": s, "k": k,
                        "rho_s": self.per["rho_s"][li, si, k],
                        "qD_s": self.per["qD_s"][li, si, k],
                        "qU_s": self.per["qU_s"][li, si, k],
                        "u_s": self.per["u_s"][li, si, k],
                        "f_s": self.per["f_s"][li, si, k],
                        "v_s": self.per["v_s"][li, si, k],
                        "rho": self.agg["rho"][li, k],
                        "qD": self.agg["qD"][li, k],
                        "qU": self.agg["qU"][li, k],
                        "u": self.agg["u"][li, k],
                        "f": self.agg["f"][li, k],
                        "v": self.agg["v"][li, k],
                    })
        return rows


def total_travel_time(state: TrafficState, gparams: GlobalParams, network: Network) -> float:
    """Direct evaluation of the travel-time objective from state arrays.

    Cumulative released flow at origin connectors minus cumulative arrivals
    at destination connectors (vehicle-minutes spent inside the network)
    plus waiting time in the origin buffers.  Independent of the assembled
    objective vector; the two must agree on any solve.
    """
    dt = gparams.dt_min
    N = gparams.n_intervals
    ttt = 0.0
    for r in sorted(network.dummy_origins):
        conn = network.connector_of_origin(r)
        li = state.link_pos[conn.id]
        v = state.agg["v"][li, 1:N + 1]
        ttt += dt * float(np.sum(np.cumsum(v * dt)))
        ttt += dt * float(np.sum(state.per["qD_s"][li, :, 1:N + 1]))
    for sdum in sorted(network.dummy_destinations):
        conn = network.connector_of_destination(sdum)
        li = state.link_pos[conn.id]
        u = state.agg["u"][li, 1:N + 1]
        ttt -= dt * float(np.sum(np.cumsum(u * dt)))
    return ttt


# ---------------------------------------------------------------------------
# independent residual replay

#: interval-edge convention for the queue-conditional flow bounds: the
#: strict cases apply only when the queue is at the trigger level on both
#:  ends of the interval (a queue crossing the level mid-interval is served
#: at capacity, as in the continuous model).


def residual_report(system: ConstraintSystem, x: np.ndarray, state: TrafficState | None = None):
    """Re-evaluate every model equation from its own definition at x.

    This path shares no code with the assembled matrices: queues come from
    cumulative sums of flows, regimes are re-derived from densities, and
    shockwave counts are recomputed from the headway field.  Returns a dict
    of per-equation maximum absolute residuals (violations for
    inequalities).
    """
    st = state or TrafficState(system, x)
    gp, net, idx = system.gparams, system.network, system.index
    N, dt, L = idx.N, gp.dt_min, gp.veh_len_km
    res = {tag: 0.0 for tag in
           ("eq25", "eq26", "eq27", "eq28", "eq29", "eq30", "eq31", "eq32",
            "eq33", "eq34", "eq35", "eq36", "eq39", "eq40", "eq41", "eq42")}

    def bump(eq, val):
        res[eq] = max(res[eq], float(val))

    for li, l in enumerate(idx.links):
        phys = not l.is_connector
        pars = l.params
        if phys:
            p = idx.phys_pos[l.id]
        for si, s in enumerate(idx.dests):
            u_s = st.per["u_s"][li, si]
            f_s = st.per["f_s"][li, si]
            v_s = st.per["v_s"][li, si]
            U = np.concatenate([[0.0], np.cumsum(u_s[1:]) * dt])
            F = np.concatenate([[0.0], np.cumsum(f_s[1:]) * dt])
            V = np.concatenate([[0.0], np.cumsum(v_s[1:]) * dt])
            bump("eq30", np.max(np.abs(st.per["qD_s"][li, si] - (F - V))))
            for k in range(1, N + 1):
                shift = int(st.n_w[p, k]) if phys else 0
                fterm = F[k - shift] if k - shift >= 1 else 0.0
                bump("eq31", abs(st.per["qU_s"][li, si, k] - (U[k] - fterm)))
            if phys:
                rho_s = st.per["rho_s"][li, si]
                for k in range(1, N + 1):
                    bump("eq27", abs(rho_s[k] - rho_s[k - 1]
                                     - dt * (u_s[k] - f_s[k]) / pars.length_km))
            for kind in ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s"):
                bump("eq39", -np.min(st.per[kind][li, si], initial=0.0))
            bump("eq41", np.max(np.abs(st.per["qD_s"][li, si, N])))
        for kind_a, kind_s, eq in (("rho", "rho_s", "eq32"), ("qD", "qD_s", "eq32"),
                                   ("qU", "qU_s", "eq32"), ("u", "u_s", "eq33"),
                                   ("f", "f_s", "eq33"), ("v", "v_s", "eq33")):
            bump(eq, np.max(np.abs(st.agg[kind_a][li] - st.per[kind_s][li].sum(axis=0))))
        if phys:
            bump("eq40", abs(st.agg["rho"][li, 0]) + abs(st.agg["qD"][li, 0]))
            bump("eq41", max(0.0, st.agg["rho"][li, N]
                             - 1.0 / (gp.end_c * pars.length_km)))
            v_f = pars.free_flow_speed
            for k in range(1, N + 1):
                h_s_val = system.h_s[p, k - 1]
                hm = headway_s_to_min(h_s_val)
                rho_c = 1.0 / (hm * v_f + L)
                rho, f = st.agg["rho"][li, k], st.agg["f"][li, k]
                if st.delta[p, k] == 0:
                    bump("eq25", max(0.0, rho - rho_c * (1 - 1e-6)))
                    bump("eq25", abs(f - v_f * rho))
                else:
                    bump("eq26", max(0.0, rho_c - rho))
                    bump("eq26", max(0.0, rho - 1.0 / L))
                    bump("eq26", abs(f - (1.0 - rho * L) / hm))
                nw = int(st.n_w[p, k])
                bump("eq28", max(0.0, nw * dt * L / hm - pars.length_km))
                bump("eq29", max(0.0, pars.length_km - (nw + 1) * dt * L / hm))
            if pars.q_down_cap != UNBOUNDED:
                bump("eq34", np.max(st.agg["qD"][li] - pars.q_down_cap, initial=0.0))
            if pars.q_up_cap != UNBOUNDED:
                bump("eq34", np.max(st.agg["qU"][li] - pars.q_up_cap, initial=0.0))
            if pars.inflow_cap != UNBOUNDED:
                bump("eq35", np.max(st.agg["u"][li] - pars.inflow_cap, initial=0.0))
            if pars.outflow_cap != UNBOUNDED:
                bump("eq35", np.max(st.agg["v"][li] - pars.outflow_cap, initial=0.0))

    for node in net.physical_nodes:
        ins = [st.link_pos[l.id] for l in net.in_links(node)]
        outs = [st.link_pos[l.id] for l in net.out_links(node)]
        for si in range(len(idx.dests)):
            inflow = sum(st.per["v_s"][li, si] for li in ins)
            outflow = sum(st.per["u_s"][li, si] for li in outs)
            bump("eq36", np.max(np.abs(np.atleast_1d(inflow - outflow)[1:])))

    n1 = gp.n_demand
    for r in sorted(net.dummy_origins):
        conn = net.connector_of_origin(r)
        li = st.link_pos[conn.id]
        for si, s in enumerate(idx.dests):
            for k in range(1, N + 1):
                d = system.demand.rate((r, s), k) if k <= n1 else 0.0
                bump("eq42", abs(st.per["f_s"][li, si, k] - d))
    return res


def prop2_residuals(state: TrafficState) -> float:
    """Worst violation of the queue-conditional flow-rate bounds.

    Interval-edge convention: the restrictive branch (queue empty / queue at
    capacity) applies only when the trigger held across the whole interval,
    i.e. at both k-1 and k; a queue that empties or fills mid-interval is
    served at the capacity bound, matching the continuous-time statement.
    """
    sysm = state.system
    idx = sysm.index
    N, dt = idx.N, sysm.gparams.dt_min
    worst = 0.0
    for l in idx.phys:
        li = state.link_pos[l.id]
        p = idx.phys_pos[l.id]
        pars = l.params
        u = state.agg["u"][li]
        v = state.agg["v"][li]
        f = state.agg["f"][li]
        qD = state.agg["qD"][li]
        qU = state.agg["qU"][li]
        for k in range(1, N + 1):
            if pars.inflow_cap != UNBOUNDED:
                worst = max(worst, u[k] - pars.inflow_cap)
            if pars.outflow_cap != UNBOUNDED:
                worst = max(worst, v[k] - pars.outflow_cap)
            nw = int(state.n_w[p, k])
            if pars.q_up_cap != UNBOUNDED and \
                    qU[k] >= pars.q_up_cap - 1e-9 and qU[k - 1] >= pars.q_up_cap - 1e-9:
                fterm = f[k - nw] if k - nw >= 1 else 0.0
                worst = max(worst, u[k] - min(fterm, pars.inflow_cap))
            if qD[k] <= 1e-9 and qD[k - 1] <= 1e-9:
                cap = pars.outflow_cap if pars.outflow_cap != UNBOUNDED else np.inf
                worst = max(worst, v[k] - min(f[k], cap))
    return float(worst)


# ---------------------------------------------------------------------------
# solve driver


class InfeasibleProblemError(RuntimeError):
    """The SO-DTA program is infeasible; carries the constructive horizon
    bound when it can be computed (a horizon at least this long is always
    feasible)."""

    def __init__(self, message, horizon_bound=None):
        super().__init__(message)
        self.horizon_bound = horizon_bound


@dataclass
class SolveResult:
    status: str
    ttt: float | None
    state: TrafficState | None
    solution: lp.LPSolution | None
    system: ConstraintSystem
    report: dict


def _round_heuristic(system: ConstraintSystem, relax: lp.LPSolution):
    """Regime pattern implied by the relaxation's densities, as a warm start."""
    idx = system.index
    L = system.gparams.veh_len_km
    delta = np.zeros((len(idx.phys), idx.N))
    for p, l in enumerate(idx.phys):
        v_f = l.params.free_flow_speed
        for k in range(1, idx.N + 1):
            hm = headway_s_to_min(system.h_s[p, k - 1])
            rho_c = 1.0 / (hm * v_f + L)
            rho = relax.x[idx.ix("rho", l.id, k)]
            delta[p, k - 1] = 1.0 if rho >= rho_c * (1 - 1e-6) else 0.0
    lo = system.program.base.lo.copy()
    hi = system.program.base.hi.copy()
    cols = system.index.delta_columns()
    lo[cols] = hi[cols] = delta.reshape(-1)
    return lp.solve_lp(system.program.base.with_bounds(lo, hi))


def solve_fixed_headway(
    network: Network,
    gparams: GlobalParams,
    demand: DemandProfile,
    h,
    *,
    incumbent_hint=None,
    node_limit=20000,
    engine=None,
) -> SolveResult:
    """Solve the SO-DTA program at a fixed headway field (seconds).

    Returns the optimal traffic state and total travel time; a replay of the
    solution through the independent residual checker is included in the
    report.  Raises InfeasibleProblemError with the constructive horizon
    bound if no feasible loading exists within the horizon.
    """
    t0 = time.perf_counter()
    system = build_constraints(network, gparams, demand, h)
    t_build = time.perf_counter() - t0

    hint = incumbent_hint
    relax = lp.solve_lp(system.program.base, engine=engine)
    if relax.status == lp.INFEASIBLE:
        bound = _horizon_bound_or_none(network, gparams, demand)
        raise InfeasibleProblemError(
            "SO-DTA program infeasible at this horizon"
            + (f"; a horizon above {bound:.1f} min is always feasible" if bound else ""),
            horizon_bound=bound)
    frac = np.abs(relax.x[system.program.binary_idx]
                  - np.round(relax.x[system.program.binary_idx]))
    if hint is None and frac.size and np.max(frac) > lp.INT_TOL:
        rounded = _round_heuristic(system, relax)
        if rounded.status == lp.OPTIMAL:
            hint = rounded.x

    t1 = time.perf_counter()
    sol = lp.solve_mip(system.program, node_limit=node_limit, engine=engine,
                       incumbent_hint=hint)
    t_solve = time.perf_counter() - t1
    if sol.status != lp.OPTIMAL:
        bound = _horizon_bound_or_none(network, gparams, demand)
        raise InfeasibleProblemError(
            f"SO-DTA solve ended with status {sol.status}", horizon_bound=bound)

    state = TrafficState(system, sol.x)
    residuals = residual_report(system, sol.x, state)
    ttt = float(sol.objective)
    report = {
        "status": sol.status,
        "ttt": ttt,
        "ttt_recomputed": total_travel_time(state, gparams, network),
        "relaxation_objective": relax.objective,
        "veh_len_km": gparams.veh_len_km,
        "residuals": residuals,
        "max_residual": max(residuals.values()),
        "prop2_violation": prop2_residuals(state),
        "delta_ones": int(np.sum(state.delta[:, 1:])),
        "nodes": sol.extra.get("nodes", 0),
        "iterations": sol.iterations,
        "time_build_s": t_build,
        "time_solve_s": t_solve,
    }
    return SolveResult("optimal", ttt, state, sol, system, report)


def _horizon_bound_or_none(network, gparams, demand):
    try:
        from .feasibility import default_plan, feasibility_horizon
        return feasibility_horizon(network, demand, default_plan(network, gparams, demand))
    except Exception:
        return None


def probe_alternate_optima(system: ConstraintSystem, sol: lp.LPSolution,
                           rng: np.random.Generator, trials: int = 2,
                           rel_perturb: float = 1e-9, engine=None) -> bool:
    """Detect alternate optimal traffic states by objective perturbation.

    Re-solves with the regime pattern fixed and a tiny random objective
    perturbation; a unique vertex optimum is stable under such
    perturbations, so any state change beyond tolerance reveals alternate
    optima.  (Regimes are pinned: uniqueness of x*, not of the branch
    encoding, is what maximin extraction depends on.)
    """
    base = system.program.base
    bins = system.program.binary_idx
    lo = base.lo.copy()
    hi = base.hi.copy()
    if bins.size:
        vals = np.round(sol.x[bins])
        lo[bins] = hi[bins] = vals
    scale = np.maximum(np.abs(base.c), 1.0)
    for _ in range(trials):
        c_pert = base.c + rng.uniform(-1.0, 1.0, base.c.size) * scale * rel_perturb
        pert = lp.LinearProgram(c_pert, base.A_eq, base.b_eq, base.A_ub, base.b_ub, lo, hi)
        s = lp.solve_lp(pert, engine=engine)
        if s.status != lp.OPTIMAL:
            return True
        if np.max(np.abs(s.x - sol.x)) > 1e-5 * (1 + np.max(np.abs(sol.x))):
            return True
    return False
