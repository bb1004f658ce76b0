"""Constructive feasibility: horizon bound and an explicit feasible loading.

The certificate loads the network one batch at a time: all demand
accumulates in the origin buffers first, then each O-D pair's demand is cut
into equal batches and pushed along a single path, one batch in flight at a
time, waiting at every link until the flow area has drained below one
vehicle before entering the next.  Within a link a batch sees three phases:
free-flow fill, steady throughput at the release rate, geometric drain.

The closed-form passage time of a batch through link (i,j),

    T_ij = T_B + (length / v_f) * ln(length * F_B / v_f),

(the logarithm clamps at zero when the steady density F_B/v_f is already
below one vehicle per link) gives the horizon bound

    T_bound = T1 + sum_od n_od * sum_{ij in path} T_ij .

For any horizon above the bound the discrete protocol below succeeds and
its state satisfies every model constraint at the per-link maximum headway,
making it feasible for every admissible headway field and an upper-bound
certificate on the optimal total travel time.

The steady-phase density is F_B / v_f: with u = f = F_B the density
recursion is stationary exactly when f = v_f * rho, i.e. rho = F_B / v_f
(the fill-phase arithmetic gives the same value; a steady density F_B/len
would contradict the recursion unless v_f equalled the link length).

Sub-vehicle residue: the discrete drain is geometric and never reaches an
exact zero, so a trailing fraction of a vehicle keeps seeping out of every
visited flow area.  Buffers forward any sub-vehicle stock downstream every
interval (magnitudes far below every capacity), which keeps all buffers at
exactly zero by the end of the horizon as the end condition requires.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import hfd, sodta
from .network import UNBOUNDED, DemandProfile, GlobalParams, Network


class PlanError(ValueError):
    """No admissible batch plan exists (no path, or empty rate interval)."""


class HorizonTooShortError(RuntimeError):
    """The horizon cannot host the serial construction; carries the bound."""

    def __init__(self, message, horizon_bound):
        super().__init__(message)
        self.horizon_bound = horizon_bound


@dataclass
class OdPlan:
    od: tuple[int, int]
    path: list[int]                 # link ids, connectors included
    total_demand: float
    batch_size: float               # equal batches, n * B = total
    n_batches: int
    release_rate: float             # F_B, veh/min
    release_time: float             # T_B, minutes per batch
    passage_times: dict             # physical link id -> T_ij minutes

    @property
    def path_time(self) -> float:
        return sum(self.passage_times.values())


@dataclass
class FeasibilityPlan:
    per_od: dict                    # od -> OdPlan
    demand_horizon: float           # T1

    def to_document(self) -> dict:
        return {
            "demand_horizon_min": self.demand_horizon,
            "od_plans": [
                {
                    "origin": od[0], "destination": od[1],
                    "path_links": p.path,
                    "total_demand_veh": p.total_demand,
                    "batch_size_veh": p.batch_size,
                    "n_batches": p.n_batches,
                    "release_rate_veh_min": p.release_rate,
                    "release_time_min": p.release_time,
                    "passage_times_min": p.passage_times,
                }
                for od, p in sorted(self.per_od.items())
            ],
        }


def _shortest_path(network: Network, origin_dummy: int, dest_dummy: int) -> list[int]:
    """Dijkstra on free-flow time; connectors cost nothing."""
    dist = {origin_dummy: 0.0}
    prev_link: dict = {}
    heap = [(0.0, origin_dummy)]
    seen = set()
    while heap:
        d, node = heapq.heappop(heap)
        if node in seen:
            continue
        seen.add(node)
        if node == dest_dummy:
            break
        for l in network.out_links(node):
            w = 0.0 if l.is_connector else l.params.free_flow_time
            nd = d + w
            if nd < dist.get(l.head, math.inf) - 1e-15:
                dist[l.head] = nd
                prev_link[l.head] = l
                heapq.heappush(heap, (nd, l.head))
    if dest_dummy not in prev_link:
        raise PlanError(f"no path from {origin_dummy} to {dest_dummy}")
    path = []
    node = dest_dummy
    while node != origin_dummy:
        l = prev_link[node]
        path.append(l.id)
        node = l.tail
    return list(reversed(path))


def default_plan(
    network: Network,
    gparams: GlobalParams,
    demand: DemandProfile,
    batch_fraction: float = 0.9,
    rate_position: float = 0.5,
) -> FeasibilityPlan:
    """Shortest path per O-D pair; batch size at 90% of the tightest queue
    capacity along the path; release rate at the midpoint of its admissible
    interval [max v_f/len, min(caps, peak flow at h_max))."""
    per_od = {}
    L = gparams.veh_len_km
    for od in demand.od_pairs:
        total = float(np.sum(demand.rates[od])) * gparams.dt_min
        if total <= 0:
            continue
        path = _shortest_path(network, od[0], od[1])
        phys = [network.link(lid) for lid in path if not network.link(lid).is_connector]
        if not phys:
            raise PlanError(f"path for {od} has no physical links")
        cap_b = min(min(l.params.q_up_cap, l.params.q_down_cap) for l in phys)
        if cap_b == UNBOUNDED:
            cap_b = total / batch_fraction + 1.0
        B_max = batch_fraction * cap_b
        n = max(1, math.ceil(total / B_max - 1e-12))
        B = total / n
        rate_lo = max(l.params.free_flow_speed / l.params.length_km for l in phys)
        rate_hi = min(min(l.params.inflow_cap, l.params.outflow_cap,
                          hfd.max_flow(l.params.h_max_s, l.params.free_flow_speed, L))
                      for l in phys)
        if not rate_lo < rate_hi:
            raise PlanError(
                f"empty release-rate interval for {od}: [{rate_lo:.4g}, {rate_hi:.4g})")
        F_B = rate_lo + rate_position * (rate_hi - rate_lo)
        T_B = B / F_B
        passage = {}
        for l in phys:
            drain_arg = l.params.length_km * F_B / l.params.free_flow_speed
            drain = (l.params.length_km / l.params.free_flow_speed) * max(0.0, math.log(drain_arg))
            passage[l.id] = T_B + drain
        per_od[od] = OdPlan(od, path, total, B, n, F_B, T_B, passage)
    return FeasibilityPlan(per_od, gparams.demand_horizon_min)


def feasibility_horizon(network: Network, demand: DemandProfile,
                        plan: FeasibilityPlan) -> float:
    """Continuous-time horizon bound of the serial batch construction."""
    total = plan.demand_horizon
    for od, p in plan.per_od.items():
        total += p.n_batches * p.path_time
    return total


def discrete_horizon_bound(network: Network, gparams: GlobalParams,
                           plan: FeasibilityPlan) -> float:
    """Interval-resolution horizon needed by the discrete protocol.

    The implicit density recursion drains slower than the continuous
    exponential (factor len/(len+dt*v_f) per interval), and loading happens
    in whole intervals, so the discrete schedule needs more room than the
    continuous bound; this rounds every phase up and adds one interval of
    slack per phase.
    """
    dt = gparams.dt_min
    total = plan.demand_horizon
    for od, p in plan.per_od.items():
        per_batch = 0
        for lid in p.path:
            l = network.link(lid)
            if l.is_connector:
                continue
            pars = l.params
            n_load = math.ceil(p.batch_size / (p.release_rate * dt)) + 1
            rho_ss_times_len = p.release_rate * pars.length_km / pars.free_flow_speed
            decay = (pars.length_km + dt * pars.free_flow_speed) / pars.length_km
            n_drain = math.ceil(math.log(max(rho_ss_times_len, 1.0 + 1e-9))
                                / math.log(decay)) + 1
            per_batch += n_load + n_drain + 2
        total += p.n_batches * per_batch * dt
    return total + 4 * dt


class _Protocol:
    """State machine for the serial batch schedule."""

    def __init__(self, network, plan, ods):
        self.network = network
        self.plan = plan
        self.ods = ods
        self.oi = 0
        self.batch = 0
        self.stage = 0
        self.draining = False
        self.moved = 0.0

    @property
    def active(self):
        return self.oi < len(self.ods)

    def od(self):
        return self.ods[self.oi]

    def odp(self):
        return self.plan.per_od[self.od()]

    def phys_path(self):
        return [lid for lid in self.odp().path
                if not self.network.link(lid).is_connector]

    def target(self):
        return self.network.link(self.phys_path()[self.stage])

    def source(self):
        if self.stage == 0:
            return self.network.link(self.odp().path[0])
        return self.network.link(self.phys_path()[self.stage - 1])

    def advance(self):
        self.stage += 1
        self.moved = 0.0
        self.draining = False
        if self.stage >= len(self.phys_path()):
            self.stage = 0
            self.batch += 1
            if self.batch >= self.odp().n_batches:
                self.batch = 0
                self.oi += 1


def construct_feasible_solution(
    network: Network,
    gparams: GlobalParams,
    demand: DemandProfile,
    plan: FeasibilityPlan | None = None,
):
    """Execute the serial-batch protocol exactly on the discrete dynamics.

    Returns (state, system): a traffic state satisfying every constraint of
    the assembled program at the per-link maximum headway, plus that
    program.  Raises HorizonTooShortError carrying the constructive bound
    when the horizon cannot host the protocol.
    """
    plan = plan or default_plan(network, gparams, demand)
    bound = feasibility_horizon(network, demand, plan)
    disc_bound = discrete_horizon_bound(network, gparams, plan)
    if gparams.horizon_min < disc_bound:
        raise HorizonTooShortError(
            f"horizon {gparams.horizon_min} min below constructive bound "
            f"{bound:.1f} min ({disc_bound:.1f} min at this interval length)",
            horizon_bound=bound)

    N = gparams.n_intervals
    dt = gparams.dt_min
    L = gparams.veh_len_km
    dests = network.destinations
    nd = len(dests)
    links = list(network.links)
    nl = len(links)
    link_pos = {l.id: i for i, l in enumerate(links)}
    phys = network.physical_links
    dest_idx = {s: i for i, s in enumerate(dests)}

    # next hop toward each destination, for forwarding sub-vehicle residue
    next_hop = {}
    for s in dests:
        for node in network.nodes:
            if node == s:
                continue
            try:
                path = _shortest_path(network, node, s) if node not in network.dummy_origins \
                    else [lid for lid in _shortest_path(network, node, s)]
            except PlanError:
                continue
            if path:
                next_hop[(node, s)] = path[0]

    per = {kind: np.zeros((nl, nd, N + 1)) for kind in
           ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s")}
    delta = np.zeros((len(phys), N))

    ods = [od for od in demand.od_pairs if od in plan.per_od]
    proto = _Protocol(network, plan, ods)
    n1 = gparams.n_demand
    from .hdq import _node_order
    order = _node_order(network)
    tiny = 1e-12

    for k in range(1, N + 1):
        for r in sorted(network.dummy_origins):
            conn = network.connector_of_origin(r)
            li = link_pos[conn.id]
            for si, s in enumerate(dests):
                d = demand.rate((r, s), k) if k <= n1 else 0.0
                per["f_s"][li, si, k] = d
                per["u_s"][li, si, k] = d

        transfer_active = proto.active and k > n1
        src = proto.source() if transfer_active else None
        target = proto.target() if transfer_active else None
        resolved = set()

        def resolve_link(l):
            if l.is_connector or l.id in resolved:
                return
            resolved.add(l.id)
            li = link_pos[l.id]
            p = phys.index(l)
            rho_prev = float(per["rho_s"][li, :, k - 1].sum())
            u_now = float(per["u_s"][li, :, k].sum())
            reg, f_agg, _ = hfd.resolve_regime(rho_prev, u_now, l.params.h_max_s,
                                               l.params, dt, L)
            delta[p, k - 1] = reg
            content = l.params.length_km * per["rho_s"][li, :, k - 1] + dt * per["u_s"][li, :, k]
            tot = content.sum()
            shares = content / tot if tot > tiny else np.zeros(nd)
            for si in range(nd):
                f_si = f_agg * shares[si]
                per["f_s"][li, si, k] = f_si
                per["rho_s"][li, si, k] = per["rho_s"][li, si, k - 1] \
                    + dt * (per["u_s"][li, si, k] - f_si) / l.params.length_km

        for node in order:
            if node in network.dummy_origins or node in network.dummy_destinations:
                continue
            ins = network.in_links(node)
            for l in ins:
                resolve_link(l)
            terminal_conns = [l for l in network.out_links(node)
                              if l.id in network.destination_connectors]
            for l in ins:
                li = link_pos[l.id]
                release = np.zeros(nd)
                if transfer_active and l.id == src.id and not proto.draining:
                    si = dest_idx[proto.od()[1]]
                    stock = per["qD_s"][li, si, k - 1] / dt + per["f_s"][li, si, k]
                    # the origin buffer holds every batch at once, so meter
                    # exactly one batch there; later buffers hold one batch
                    # plus residue and are drained whole
                    remaining = (proto.odp().batch_size - proto.moved) / dt \
                        if proto.stage == 0 else np.inf
                    pull = min(proto.odp().release_rate, max(stock, 0.0), max(remaining, 0.0))
                    release[si] = pull
                    proto.moved += pull * dt
                    ti = link_pos[target.id]
                    per["u_s"][ti, si, k] += pull
                    if proto.stage == 0:
                        done = proto.moved >= proto.odp().batch_size - 1e-9
                    else:
                        done = stock - pull <= 1e-9 and \
                            float(per["rho_s"][li, :, k].sum()) < 1.0 / l.params.length_km
                    if done:
                        proto.draining = True
                else:
                    # forward sub-vehicle residue (or anything bound for an
                    # attached destination, where intake is unconstrained)
                    for si, s in enumerate(dests):
                        vol = per["qD_s"][li, si, k - 1] / dt + per["f_s"][li, si, k]
                        if vol <= tiny:
                            continue
                        to_terminal = any(c.head == s for c in terminal_conns)
                        if to_terminal:
                            cap = l.params.outflow_cap if not l.is_connector and \
                                l.params.outflow_cap != UNBOUNDED else np.inf
                            take = min(vol, cap)
                            release[si] = take
                            conn = next(c for c in terminal_conns if c.head == s)
                            per["u_s"][link_pos[conn.id], si, k] += take
                        elif vol * dt <= 1.0 and (node, s) in next_hop:
                            hop = network.link(next_hop[(node, s)])
                            if hop.id in resolved or hop.is_connector:
                                continue  # too late this interval; next one
                            room = hop.params.inflow_cap - float(per["u_s"][link_pos[hop.id], :, k].sum()) \
                                if hop.params.inflow_cap != UNBOUNDED else np.inf
                            take = min(vol, max(room, 0.0))
                            release[si] = take
                            per["u_s"][link_pos[hop.id], si, k] += take
                per["v_s"][li, :, k] = release
        for l in phys:
            resolve_link(l)
        # destination connectors forward instantly
        for sdum in sorted(network.dummy_destinations):
            conn = network.connector_of_destination(sdum)
            li = link_pos[conn.id]
            per["f_s"][li, :, k] = per["u_s"][li, :, k]
            per["v_s"][li, :, k] = per["f_s"][li, :, k]

        if transfer_active and proto.draining:
            if float(per["rho_s"][link_pos[target.id], :, k].sum()) \
                    < 1.0 / target.params.length_km:
                proto.advance()

        for li, l in enumerate(links):
            shift = 0 if l.is_connector else int(hfd.shockwave_steps(
                l.params.h_max_s, dt, L, l.params.length_km))
            for si in range(nd):
                F = float(np.sum(per["f_s"][li, si, 1:k + 1])) * dt
                V = float(np.sum(per["v_s"][li, si, 1:k + 1])) * dt
                U = float(np.sum(per["u_s"][li, si, 1:k + 1])) * dt
                per["qD_s"][li, si, k] = F - V
                Flag = float(np.sum(per["f_s"][li, si, 1:k - shift + 1])) * dt \
                    if k - shift >= 1 else 0.0
                per["qU_s"][li, si, k] = U - Flag

    h_max_field = np.array([[l.params.h_max_s] * N for l in phys])
    system = sodta.build_constraints(network, gparams, demand, h_max_field,
                                     fixed_delta=delta)
    x = _pack_state(system, per)
    state = sodta.TrafficState(system, x)
    res = sodta.residual_report(system, x, state)
    worst = max(res.values())
    if worst > 1e-6:
        bad = {k2: v for k2, v in res.items() if v > 1e-6}
        raise HorizonTooShortError(
            f"constructed state violates the model ({bad}); horizon "
            f"{gparams.horizon_min} min vs bound {bound:.1f} min",
            horizon_bound=bound)
    return state, system


def _pack_state(system: sodta.ConstraintSystem, per: dict) -> np.ndarray:
    idx = system.index
    x = np.zeros(idx.n)
    dt = system.gparams.dt_min
    for li, l in enumerate(idx.links):
        for si, s in enumerate(idx.dests):
            U = np.concatenate([[0.0], np.cumsum(per["u_s"][li, si, 1:]) * dt])
            F = np.concatenate([[0.0], np.cumsum(per["f_s"][li, si, 1:]) * dt])
            V = np.concatenate([[0.0], np.cumsum(per["v_s"][li, si, 1:]) * dt])
            for k in range(1, idx.N + 1):
                for kind in ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s"):
                    x[idx.ix(kind, l.id, s, k)] = per[kind][li, si, k]
                x[idx.ix("U_s", l.id, s, k)] = U[k]
                x[idx.ix("F_s", l.id, s, k)] = F[k]
                x[idx.ix("V_s", l.id, s, k)] = V[k]
        for k in range(1, idx.N + 1):
            for agg, kind in (("rho", "rho_s"), ("u", "u_s"), ("f", "f_s"),
                              ("v", "v_s"), ("qD", "qD_s"), ("qU", "qU_s")):
                x[idx.ix(agg, l.id, k)] = float(per[kind][li, :, k].sum())
    return x
