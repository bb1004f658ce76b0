"""Headway-dependent double-queue link state and a forward network simulator.

Each link is split into a flow area (density dynamics under the
headway-dependent fundamental diagram, holding the upstream queue) and a
buffer area (point queue at the downstream end).  Queues are defined from
cumulative curves,

    qD(k) = F(k) - V(k) + qD(0)
    qU(k) = U(k) - F(k - n_w(k)) + qU(0),      F(j) = 0 for j <= 0,

with U/F/V the cumulative inflow, boundary flow and outflow and n_w the
shockwave step count.  The network starts empty, so qU(0) = qD(0) = 0.

The simulator propagates a demand profile through the network under given
per-node destination split fractions, serving queues greedily while
respecting the queue-dependent flow-rate bounds; or it replays an externally
supplied flow schedule (for example an optimizer solution) and reports the
residual of every model relation along the way.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import hfd
from .network import UNBOUNDED, DemandProfile, GlobalParams, Network


class FlowConsistencyError(ValueError):
    """Cumulative curves imply a negative queue."""


class DqAssumptionError(ValueError):
    """Trajectory does not satisfy the free-flow reduction premise."""


def downstream_queue(F, V, k, q0=0.0) -> float:
    """Buffer content at interval k from cumulative boundary flow/outflow."""
    q = float(F[k] - V[k] + q0)
    if q < -1e-9 * (1 + abs(float(F[k]))):
        raise FlowConsistencyError(f"downstream queue {q} < 0 at k={k}")
    return q


def upstream_queue(U, F, n_w, k, q0=0.0) -> float:
    """Entrance queue at interval k; freed space needs n_w intervals to
    propagate back, so the boundary-flow curve is lagged."""
    j = k - n_w
    fterm = float(F[j]) if j >= 1 else 0.0
    q = float(U[k] - fterm + q0)
    if q < -1e-9 * (1 + abs(float(U[k]))):
        raise FlowConsistencyError(f"upstream queue {q} < 0 at k={k}")
    return q


def flow_upper_bounds(params, q_up, q_down, f_lagged, f_now) -> tuple[float, float]:
    """Queue-conditional bounds on inflow and outflow rates.

    A full entrance queue throttles the inflow to the lagged boundary flow;
    an empty buffer throttles the outflow to the current boundary flow.
    """
    if params.q_up_cap != UNBOUNDED and q_up >= params.q_up_cap:
        u_max = min(f_lagged, params.inflow_cap)
    else:
        u_max = params.inflow_cap
    if q_down <= 0.0:
        v_max = min(f_now, params.outflow_cap)
    else:
        v_max = params.outflow_cap
    return u_max, v_max


def vehicles_on_link(length_km, rho_k, q_down_k) -> float:
    """Total content: flow-area vehicles plus buffered vehicles."""
    return length_km * rho_k + q_down_k


@dataclass
class Trajectory:
    """Dense per-link, per-destination state over the horizon.

    Arrays have a leading k=0 column for the (empty) initial state.  The
    `report` carries the worst violation found for each model relation.
    """

    network: Network
    gparams: GlobalParams
    dests: list
    h_s: np.ndarray                  # (n_phys, N)
    n_w: np.ndarray                  # (n_phys, N)
    per: dict                        # kind -> (n_links, n_dests, N+1)
    agg: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.links = list(self.network.links)
        self.link_pos = {l.id: i for i, l in enumerate(self.links)}
        self.phys_pos = {l.id: i for i, l in enumerate(self.network.physical_links)}
        if not self.agg:
            self.agg = {k.replace("_s", ""): v.sum(axis=1) for k, v in self.per.items()
                        if k in ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s")}

    @property
    def n_intervals(self):
        return self.gparams.n_intervals

    def cumulative(self, link_id, dest=None):
        """(U, F, V) cumulative curves in vehicles, index 0..N."""
        li = self.link_pos[link_id]
        dt = self.gparams.dt_min
        if dest is None:
            u, f, v = self.agg["u"][li], self.agg["f"][li], self.agg["v"][li]
        else:
            si = self.dests.index(dest)
            u = self.per["u_s"][li, si]
            f = self.per["f_s"][li, si]
            v = self.per["v_s"][li, si]
        U = np.concatenate([[0.0], np.cumsum(u[1:]) * dt])
        F = np.concatenate([[0.0], np.cumsum(f[1:]) * dt])
        V = np.concatenate([[0.0], np.cumsum(v[1:]) * dt])
        return U, F, V

    def to_rows(self):
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


def _node_order(network: Network) -> list:
    """BFS order from the dummy origins; unreached nodes appended last.

    Within one interval flow cascades along this order, which resolves the
    simultaneous coupling of the discrete model on acyclic networks and
    fixes a deterministic single-sweep rule on cyclic ones.
    """
    order, seen = [], set()
    queue = deque(sorted(network.dummy_origins))
    seen.update(queue)
    while queue:
        n = queue.popleft()
        order.append(n)
        for l in network.out_links(n):
            if l.head not in seen:
                seen.add(l.head)
                queue.append(l.head)
    for n in sorted(network.nodes):
        if n not in seen:
            order.append(n)
    return order


class SplitRouting:
    """Constant per-node, per-destination split fractions over outgoing links.

    splits[(node, dest)] = {link_id: fraction}; fractions are normalized.
    Missing entries fall back to equal splits over outgoing links that can
    still reach the destination.
    """

    def __init__(self, splits=None):
        self.splits = {}
        for key, frac in (splits or {}).items():
            total = sum(frac.values())
            if total <= 0:
                raise ValueError(f"split fractions for {key} sum to {total}")
            self.splits[key] = {lid: v / total for lid, v in frac.items()}

    def fractions(self, network, node, dest, reach):
        if (node, dest) in self.splits:
            return self.splits[(node, dest)]
        outs = [l for l in network.out_links(node) if l.head in reach]
        if not outs:
            return {}
        return {l.id: 1.0 / len(outs) for l in outs}


def simulate(
    network: Network,
    gparams: GlobalParams,
    demand: DemandProfile,
    h,
    routing: SplitRouting | None = None,
    schedules: dict | None = None,
) -> Trajectory:
    """Forward-propagate the demand through the double-queue network.

    Either `routing` supplies split fractions and the simulator serves
    queues greedily within the queue-dependent bounds, or `schedules`
    replays exogenous flows: a dict with per-destination arrays of shape
    (n_links, n_dests, N+1) for keys "u_s", "f_s", "v_s" (an optimizer
    solution, say), in which case the simulator recomputes densities,
    queues and regime flags from the flows and reports every residual.
    Infeasibilities are reported in `trajectory.report`, not raised.
    """
    from .sodta import headway_array

    h_s = headway_array(h, network, gparams)
    N = gparams.n_intervals
    dt = gparams.dt_min
    L = gparams.veh_len_km
    dests = network.destinations
    nd = len(dests)
    links = list(network.links)
    nl = len(links)
    link_pos = {l.id: i for i, l in enumerate(links)}
    phys = network.physical_links
    phys_pos = {l.id: i for i, l in enumerate(phys)}

    n_w = np.zeros((len(phys), N), dtype=int)
    for p, l in enumerate(phys):
        for k in range(1, N + 1):
            n_w[p, k - 1] = hfd.shockwave_steps(h_s[p, k - 1], dt, L, l.params.length_km)

    per = {kind: np.zeros((nl, nd, N + 1)) for kind in
           ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s")}
    delta = np.zeros((len(phys), N + 1))
    worst: dict[str, float] = {}

    def bump(tag, amount):
        if amount > worst.get(tag, 0.0):
            worst[tag] = float(amount)

    replay = schedules is not None
    if replay:
        for key in ("u_s", "f_s", "v_s"):
            per[key][...] = schedules[key]
    reach = {s: network.reachable_to(s) for s in dests}
    order = _node_order(network)
    routing = routing or SplitRouting()
    n1 = gparams.n_demand
    tiny = 1e-12

    def cum(kind, li, si, upto):
        return float(np.sum(per[kind][li, si, 1:upto + 1])) * dt

    for k in range(1, N + 1):
        # demand arrives at the origin buffers
        for r in sorted(network.dummy_origins):
            conn = network.connector_of_origin(r)
            li = link_pos[conn.id]
            for si, s in enumerate(dests):
                d = demand.rate((r, s), k) if k <= n1 else 0.0
                if not replay:
                    per["f_s"][li, si, k] = d
                    per["u_s"][li, si, k] = d
                else:
                    bump("eq42", abs(per["f_s"][li, si, k] - d))

        if replay:
            _replay_interval(network, gparams, per, delta, n_w, h_s, k,
                             link_pos, phys_pos, dests, bump)
        else:
            _greedy_interval(network, gparams, per, delta, n_w, h_s, k,
                             link_pos, phys_pos, dests, reach, order, routing,
                             bump, tiny)

        # queues from cumulative definitions
        for li, l in enumerate(links):
            for si in range(nd):
                F = cum("f_s", li, si, k)
                V = cum("v_s", li, si, k)
                U = cum("u_s", li, si, k)
                per["qD_s"][li, si, k] = F - V
                shift = int(n_w[phys_pos[l.id], k - 1]) if not l.is_connector else 0
                Flag = cum("f_s", li, si, k - shift) if k - shift >= 1 else 0.0
                per["qU_s"][li, si, k] = U - Flag
                bump("eq39", -min(per["qD_s"][li, si, k], 0.0))

    traj = Trajectory(network, gparams, dests, h_s, n_w, per)
    traj.report = _trajectory_checks(traj, worst)
    return traj


def _greedy_interval(network, gparams, per, delta, n_w, h_s, k, link_pos,
                     phys_pos, dests, reach, order, routing, bump, tiny):
    dt = gparams.dt_min
    L = gparams.veh_len_km
    nd = len(dests)
    resolved = set()

    def resolve_link(l):
        """Apply the regime closed form once u(.,k) is final."""
        li = link_pos[l.id]
        if l.is_connector or l.id in resolved:
            return
        resolved.add(l.id)
        p = phys_pos[l.id]
        rho_prev = float(per["rho_s"][li, :, k - 1].sum())
        u_now = float(per["u_s"][li, :, k].sum())
        reg, f_agg, _rho = hfd.resolve_regime(rho_prev, u_now, h_s[p, k - 1],
                                              l.params, dt, L)
        delta[p, k] = reg
        content = l.params.length_km * per["rho_s"][li, :, k - 1] + dt * per["u_s"][li, :, k]
        total = content.sum()
        shares = content / total if total > tiny else np.zeros(nd)
        for si in range(nd):
            f_si = f_agg * shares[si]
            per["f_s"][li, si, k] = f_si
            per["rho_s"][li, si, k] = per["rho_s"][li, si, k - 1] \
                + dt * (per["u_s"][li, si, k] - f_si) / l.params.length_km

    def intake_limit(l):
        """Inflow rate keeping the entrance queue strictly under its cap."""
        if l.is_connector:
            return np.inf
        li = link_pos[l.id]
        p = phys_pos[l.id]
        params = l.params
        cap = params.inflow_cap if params.inflow_cap != UNBOUNDED else np.inf
        if params.q_up_cap == UNBOUNDED:
            return cap
        shift = int(n_w[p, k - 1])
        F_lag = float(np.sum(per["f_s"][li, :, 1:max(k - shift, 0) + 1])) * dt \
            if k - shift >= 1 else 0.0
        U_prev = float(np.sum(per["u_s"][li, :, 1:k])) * dt
        room = (params.q_up_cap * (1 - 1e-12) + F_lag - U_prev) / dt
        return max(0.0, min(cap, room))

    for node in order:
        if node in network.dummy_origins or node in network.dummy_destinations:
            continue
        ins = network.in_links(node)
        outs = network.out_links(node)
        for l in ins:
            resolve_link(l)
        # per-destination availability at this node's buffers
        avail = np.zeros((len(ins), nd))
        for e, l in enumerate(ins):
            li = link_pos[l.id]
            for si in range(nd):
                stock = per["qD_s"][li, si, k - 1] / dt + per["f_s"][li, si, k]
                avail[e, si] = max(0.0, stock)
        # outflow service bound per incoming link
        v_cap = np.zeros(len(ins))
        for e, l in enumerate(ins):
            li = link_pos[l.id]
            if l.is_connector:
                v_cap[e] = np.inf
                continue
            f_now = float(per["f_s"][li, :, k].sum())
            qD_prev = float(per["qD_s"][li, :, k - 1].sum())
            cap = l.params.outflow_cap if l.params.outflow_cap != UNBOUNDED else np.inf
            v_cap[e] = min(cap, f_now + max(0.0, qD_prev * (1 - 1e-9)) / dt)
        theta = np.ones(len(ins))
        for e in range(len(ins)):
            tot = avail[e].sum()
            if tot > v_cap[e] and tot > tiny:
                theta[e] = v_cap[e] / tot
        release = avail * theta[:, None]           # candidate v_s per in-link
        # scale down against every outgoing link's intake
        y = release.sum(axis=0)                    # per destination
        scale = 1.0
        for l in outs:
            u_in = 0.0
            for si, s in enumerate(dests):
                frac = routing.fractions(network, node, s, reach[s]).get(l.id, 0.0)
                u_in += frac * y[si]
            cap = intake_limit(l)
            if u_in > cap and u_in > tiny:
                scale = min(scale, cap / u_in)
        release *= scale
        y = release.sum(axis=0)
        for e, l in enumerate(ins):
            li = link_pos[l.id]
            per["v_s"][li, :, k] = release[e]
        for l in outs:
            li = link_pos[l.id]
            for si, s in enumerate(dests):
                frac = routing.fractions(network, node, s, reach[s]).get(l.id, 0.0)
                per["u_s"][li, si, k] = frac * y[si]
    for l in network.physical_links:
        resolve_link(l)
    # destination connectors forward instantly
    for sdum in sorted(network.dummy_destinations):
        conn = network.connector_of_destination(sdum)
        li = link_pos[conn.id]
        per["f_s"][li, :, k] = per["u_s"][li, :, k]
        per["v_s"][li, :, k] = per["f_s"][li, :, k]


def _replay_interval(network, gparams, per, delta, n_w, h_s, k, link_pos,
                     phys_pos, dests, bump):
    dt = gparams.dt_min
    L = gparams.veh_len_km
    for l in network.physical_links:
        li = link_pos[l.id]
        p = phys_pos[l.id]
        rho_prev = float(per["rho_s"][li, :, k - 1].sum())
        u_now = float(per["u_s"][li, :, k].sum())
        reg, f_agg, rho_new = hfd.resolve_regime(rho_prev, u_now, h_s[p, k - 1],
                                                 l.params, dt, L)
        delta[p, k] = reg
        bump("fd-replay", abs(float(per["f_s"][li, :, k].sum()) - f_agg))
        for si in range(len(dests)):
            per["rho_s"][li, si, k] = per["rho_s"][li, si, k - 1] \
                + dt * (per["u_s"][li, si, k] - per["f_s"][li, si, k]) / l.params.length_km
            bump("eq39", -min(per["rho_s"][li, si, k], 0.0))
    for node in network.physical_nodes:
        for si in range(len(dests)):
            inflow = sum(per["v_s"][link_pos[l.id], si, k] for l in network.in_links(node))
            outflow = sum(per["u_s"][link_pos[l.id], si, k] for l in network.out_links(node))
            bump("eq36", abs(inflow - outflow))


def _trajectory_checks(traj: Trajectory, worst: dict) -> dict:
    """Capacity, conservation and queue-bound checks over a full trajectory."""
    net, gp = traj.network, traj.gparams
    N, dt = gp.n_intervals, gp.dt_min
    for l in net.physical_links:
        li = traj.link_pos[l.id]
        p = traj.phys_pos[l.id]
        params = l.params
        u = traj.agg["u"][li]
        v = traj.agg["v"][li]
        f = traj.agg["f"][li]
        qD = traj.agg["qD"][li]
        qU = traj.agg["qU"][li]
        if params.inflow_cap != UNBOUNDED:
            worst["eq35"] = max(worst.get("eq35", 0.0), float(np.max(u - params.inflow_cap)))
        if params.outflow_cap != UNBOUNDED:
            worst["eq35"] = max(worst.get("eq35", 0.0), float(np.max(v - params.outflow_cap)))
        if params.q_down_cap != UNBOUNDED:
            worst["eq34"] = max(worst.get("eq34", 0.0), float(np.max(qD - params.q_down_cap)))
        if params.q_up_cap != UNBOUNDED:
            worst["eq34"] = max(worst.get("eq34", 0.0), float(np.max(qU - params.q_up_cap)))
        # queue-conditional flow bounds with the interval-edge convention
        for k in range(1, N + 1):
            nw = int(traj.n_w[p, k - 1])
            if params.q_up_cap != UNBOUNDED and \
                    qU[k] >= params.q_up_cap - 1e-9 and qU[k - 1] >= params.q_up_cap - 1e-9:
                f_lag = f[k - nw] if k - nw >= 1 else 0.0
                worst["prop2"] = max(worst.get("prop2", 0.0),
                                     float(u[k] - min(f_lag, params.inflow_cap)))
            if qD[k] <= 1e-9 and qD[k - 1] <= 1e-9:
                cap = params.outflow_cap if params.outflow_cap != UNBOUNDED else np.inf
                worst["prop2"] = max(worst.get("prop2", 0.0), float(v[k] - min(f[k], cap)))
        # conservation: content equals cumulative in minus cumulative out
        U, F, V = traj.cumulative(l.id)
        content = params.length_km * traj.agg["rho"][li] + qD
        worst["conservation"] = max(worst.get("conservation", 0.0),
                                    float(np.max(np.abs(content - (U - V)))))
    worst.setdefault("prop2", 0.0)
    worst.setdefault("conservation", 0.0)
    return worst


def dq_reduction_check(traj: Trajectory, tol=1e-9) -> dict:
    """Deviation between the two-queue model and its fixed-headway,
    free-flow reduction.

    Premise: per link, constant headway (constant n_w) and free-flow
    propagation u(k - tau_f/dt) = f(k) with an integer lag.  Under it the
    reduced downstream queue U(k-m) - V(k) must match qD(k) exactly, and the
    reduced upstream queue U(k) - V(k-n_w) must equal qU(k) + qD(k-n_w).
    Returns the maximum deviation of each identity.
    """
    gp = traj.gparams
    N, dt = gp.n_intervals, gp.dt_min
    max_down, max_up = 0.0, 0.0
    for l in traj.network.physical_links:
        p = traj.phys_pos[l.id]
        li = traj.link_pos[l.id]
        if np.unique(traj.n_w[p]).size != 1:
            raise DqAssumptionError(f"link {l.name}: headway varies over time")
        nw = int(traj.n_w[p, 0])
        m_float = l.params.free_flow_time / dt
        m = int(round(m_float))
        if abs(m_float - m) > 1e-9:
            raise DqAssumptionError(
                f"link {l.name}: free-flow time {l.params.free_flow_time} min is "
                f"not an integer number of intervals")
        U, F, V = traj.cumulative(l.id)
        for k in range(1, N + 1):
            u_lag = traj.agg["u"][li, k - m] if k - m >= 1 else 0.0
            if abs(u_lag - traj.agg["f"][li, k]) > tol * (1 + abs(u_lag)):
                raise DqAssumptionError(
                    f"link {l.name}, k={k}: u(k-m)={u_lag} != f(k)="
                    f"{traj.agg['f'][li, k]}; not a free-flow trajectory")
        qD = traj.agg["qD"][li]
        qU = traj.agg["qU"][li]
        for k in range(1, N + 1):
            q_d = (U[k - m] if k - m >= 0 else 0.0) - V[k]
            max_down = max(max_down, abs(q_d - qD[k]))
            q_u = U[k] - (V[k - nw] if k - nw >= 0 else 0.0)
            shifted = qD[k - nw] if k - nw >= 0 else 0.0
            max_up = max(max_up, abs(q_u - (qU[k] + shifted)))
    return {"down_deviation": max_down, "up_deviation": max_up}
