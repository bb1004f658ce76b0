"""Road network model: links, parameters, demand, file ingestion.

A network is a directed graph whose node set contains the physical
intersections plus one dummy node per origin and per destination.  Dummy
nodes attach to the physical network through *connector* links: an origin
connector (dummy origin -> physical node) whose downstream buffer holds
vehicles waiting to depart, and a destination connector (physical node ->
dummy destination) that absorbs arrivals.  Connectors carry no capacity,
density or headway constraints; their queue/flow capacities are the
:data:`UNBOUNDED` sentinel.

Units: km, minutes, vehicles.  Headway bounds are stored in seconds (they
are interface values, see :mod:`headwayopt.units`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .units import headway_s_to_min

#: Sentinel for connector capacities (vehicles or veh/min).
UNBOUNDED = math.inf


class TntpParseError(ValueError):
    """A TNTP net/trips file could not be parsed."""


@dataclass(frozen=True)
class LinkParams:
    """Physical parameters of one link.

    free_flow_speed  km/min
    length_km        km
    q_up_cap         upstream queue capacity, vehicles
    q_down_cap       downstream queue capacity, vehicles
    inflow_cap       veh/min
    outflow_cap      veh/min
    h_min_s, h_max_s headway bounds, seconds
    """

    free_flow_speed: float
    length_km: float
    q_up_cap: float
    q_down_cap: float
    inflow_cap: float
    outflow_cap: float
    h_min_s: float
    h_max_s: float

    @property
    def free_flow_time(self) -> float:
        """Free-flow traversal time of the link, minutes."""
        return self.length_km / self.free_flow_speed

    @property
    def h_min(self) -> float:
        """Lower headway bound in minutes."""
        return headway_s_to_min(self.h_min_s)

    @property
    def h_max(self) -> float:
        """Upper headway bound in minutes."""
        return headway_s_to_min(self.h_max_s)


#: Parameters used for connector links (no physical constraints apply).
CONNECTOR_PARAMS = LinkParams(
    free_flow_speed=UNBOUNDED,
    length_km=0.0,
    q_up_cap=UNBOUNDED,
    q_down_cap=UNBOUNDED,
    inflow_cap=UNBOUNDED,
    outflow_cap=UNBOUNDED,
    h_min_s=0.0,
    h_max_s=UNBOUNDED,
)


@dataclass(frozen=True)
class Link:
    id: int
    tail: int
    head: int
    params: LinkParams
    is_connector: bool = False

    @property
    def name(self) -> str:
        return f"{self.tail}->{self.head}"


@dataclass(frozen=True)
class GlobalParams:
    """Discretization and vehicle parameters shared by the whole model."""

    veh_len_km: float = 0.005
    dt_min: float = 5.0
    n_intervals: int = 18
    demand_horizon_min: float = 40.0
    #: end-state density bound is 1/(end_c * length); end_c slightly above 1
    #: turns the strict "fewer than one vehicle left" condition into a
    #: closed inequality the LP can carry.
    end_c: float = 1.0 / (1.0 - 1e-6)

    @property
    def horizon_min(self) -> float:
        return self.n_intervals * self.dt_min

    @property
    def n_demand(self) -> int:
        """Number of intervals carrying demand."""
        n1 = self.demand_horizon_min / self.dt_min
        n1_int = int(round(n1))
        if abs(n1 - n1_int) > 1e-9:
            raise ValueError(
                f"demand horizon {self.demand_horizon_min} min is not a "
                f"multiple of dt={self.dt_min} min"
            )
        return n1_int


@dataclass
class Network:
    nodes: set[int]
    links: list[Link]
    dummy_origins: set[int]
    dummy_destinations: set[int]
    origin_connectors: set[int] = field(default_factory=set)
    destination_connectors: set[int] = field(default_factory=set)

    def __post_init__(self):
        self._by_id = {l.id: l for l in self.links}
        self._out: dict[int, list[Link]] = {n: [] for n in self.nodes}
        self._in: dict[int, list[Link]] = {n: [] for n in self.nodes}
        for l in self.links:
            self._out[l.tail].append(l)
            self._in[l.head].append(l)

    def link(self, link_id: int) -> Link:
        return self._by_id[link_id]

    def out_links(self, node: int) -> list[Link]:
        return self._out[node]

    def in_links(self, node: int) -> list[Link]:
        return self._in[node]

    @property
    def physical_links(self) -> list[Link]:
        return [l for l in self.links if not l.is_connector]

    @property
    def physical_nodes(self) -> list[int]:
        skip = self.dummy_origins | self.dummy_destinations
        return sorted(n for n in self.nodes if n not in skip)

    @property
    def destinations(self) -> list[int]:
        return sorted(self.dummy_destinations)

    def connector_of_origin(self, dummy_origin: int) -> Link:
        outs = [l for l in self._out[dummy_origin] if l.id in self.origin_connectors]
        if len(outs) != 1:
            raise ValueError(f"dummy origin {dummy_origin} has {len(outs)} connectors")
        return outs[0]

    def connector_of_destination(self, dummy_dest: int) -> Link:
        ins = [l for l in self._in[dummy_dest] if l.id in self.destination_connectors]
        if len(ins) != 1:
            raise ValueError(f"dummy destination {dummy_dest} has {len(ins)} connectors")
        return ins[0]

    def reachable_to(self, dest: int) -> set[int]:
        """Nodes from which `dest` can be reached."""
        rev: dict[int, list[int]] = {n: [] for n in self.nodes}
        for l in self.links:
            rev[l.head].append(l.tail)
        seen = {dest}
        stack = [dest]
        while stack:
            for p in rev[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen


@dataclass
class DemandProfile:
    """Per O-D (dummy origin, dummy destination) demand rates, veh/min.

    `rates[(r, s)]` is an array of length `n_demand`; demand is zero in
    later intervals.
    """

    rates: dict[tuple[int, int], np.ndarray]
    n_demand: int

    def rate(self, od: tuple[int, int], k: int) -> float:
        """Demand rate in interval k (1-based); zero past the demand horizon."""
        if od not in self.rates or k > self.n_demand:
            return 0.0
        return float(self.rates[od][k - 1])

    @property
    def od_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.rates.keys())

    def total(self, dt_min: float) -> float:
        """Total demand in vehicles."""
        return float(sum(r.sum() for r in self.rates.values()) * dt_min)

    @staticmethod
    def constant(od_rates: dict[tuple[int, int], float], n_demand: int) -> "DemandProfile":
        return DemandProfile(
            rates={od: np.full(n_demand, r, dtype=float) for od, r in od_rates.items()},
            n_demand=n_demand,
        )


# ---------------------------------------------------------------------------
# construction helpers


def attach_connectors(
    nodes: set[int],
    links: list[Link],
    origins: list[int],
    destinations: list[int],
) -> Network:
    """Add one dummy node + connector per origin/destination node."""
    next_node = max(nodes) + 1
    all_nodes = set(nodes)
    all_links = list(links)
    dummy_origins, dummy_dests = set(), set()
    origin_conn, dest_conn = set(), set()
    next_link = max((l.id for l in links), default=-1) + 1
    for o in origins:
        dummy = next_node
        next_node += 1
        all_nodes.add(dummy)
        dummy_origins.add(dummy)
        all_links.append(Link(next_link, dummy, o, CONNECTOR_PARAMS, is_connector=True))
        origin_conn.add(next_link)
        next_link += 1
    for d in destinations:
        dummy = next_node
        next_node += 1
        all_nodes.add(dummy)
        dummy_dests.add(dummy)
        all_links.append(Link(next_link, d, dummy, CONNECTOR_PARAMS, is_connector=True))
        dest_conn.add(next_link)
        next_link += 1
    return Network(
        nodes=all_nodes,
        links=all_links,
        dummy_origins=dummy_origins,
        dummy_destinations=dummy_dests,
        origin_connectors=origin_conn,
        destination_connectors=dest_conn,
    )


def resolve_vehicle_length(
    network: Network, dt_min: float, requested: float = 0.005, fallback: float = 0.004
) -> float:
    """Pick a vehicle length satisfying dt*L < min(length * h_min) strictly.

    The default 5 m car fails the strict discretization condition exactly at
    equality on some networks; in that case fall back to 4 m.  The effective
    value is echoed in solve reports.
    """
    phys = network.physical_links
    if not phys:
        return requested
    min_lh = min(l.params.length_km * l.params.h_min for l in phys)
    if dt_min * requested < min_lh:
        return requested
    if dt_min * fallback < min_lh:
        return fallback
    return requested


def build_small_network() -> tuple[Network, GlobalParams, DemandProfile]:
    """The five-node benchmark network.

    Two origin nodes (1, 2), one destination node (5), six links whose flow
    capacities, queue capacities, free-flow speeds and lengths follow the
    published benchmark table.  Inflow and outflow capacities coincide, as
    do up/down queue capacities.  Demand is 50 veh/min per O-D pair for the
    first 40 minutes of a 90 minute horizon at 5 minute resolution.
    """
    # link rows: tail, head, flow cap (veh/min), queue cap (veh),
    #            free-flow speed (km/min), length (km)
    rows = [
        (1, 3, 50.0, 600.0, 1.2, 3.6),
        (1, 4, 45.0, 600.0, 1.1, 3.3),
        (2, 3, 45.0, 600.0, 1.2, 3.6),
        (2, 4, 50.0, 600.0, 1.1, 3.3),
        (3, 5, 60.0, 600.0, 1.0, 4.0),
        (4, 5, 60.0, 600.0, 1.0, 3.0),
    ]
    links = [
        Link(
            i,
            tail,
            head,
            LinkParams(
                free_flow_speed=vf,
                length_km=length,
                q_up_cap=qcap,
                q_down_cap=qcap,
                inflow_cap=cap,
                outflow_cap=cap,
                h_min_s=0.5,
                h_max_s=2.5,
            ),
        )
        for i, (tail, head, cap, qcap, vf, length) in enumerate(rows)
    ]
    network = attach_connectors({1, 2, 3, 4, 5}, links, origins=[1, 2], destinations=[5])
    gp = GlobalParams(dt_min=5.0, n_intervals=18, demand_horizon_min=40.0)
    gp = replace(gp, veh_len_km=resolve_vehicle_length(network, gp.dt_min))
    (r1, r2) = sorted(network.dummy_origins)
    (s5,) = network.dummy_destinations
    demand = DemandProfile.constant({(r1, s5): 50.0, (r2, s5): 50.0}, gp.n_demand)
    return network, gp, demand


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    link_id: int | None
    message: str


def validate(network: Network, gparams: GlobalParams) -> list[Violation]:
    """Check link-parameter invariants and the discretization condition.

    Violations are returned as data, not raised: an empty list means the
    network is safe to hand to constraint assembly.
    """
    out: list[Violation] = []
    for l in network.physical_links:
        p = l.params
        for name in ("free_flow_speed", "length_km", "q_up_cap", "q_down_cap",
                     "inflow_cap", "outflow_cap", "h_min_s", "h_max_s"):
            if not getattr(p, name) > 0:
                out.append(Violation("nonpositive-param", l.id,
                                     f"link {l.name}: {name} must be positive"))
        if p.h_min_s > p.h_max_s:
            out.append(Violation("headway-order", l.id,
                                 f"link {l.name}: h_min {p.h_min_s}s > h_max {p.h_max_s}s"))
        if not gparams.dt_min * gparams.veh_len_km < p.length_km * p.h_min:
            out.append(Violation(
                "discretization", l.id,
                f"link {l.name}: dt*L = {gparams.dt_min * gparams.veh_len_km:.6g} "
                f"km*min >= length*h_min = {p.length_km * p.h_min:.6g}; shockwave "
                f"would resolve within one interval"))
        # the constructive feasibility argument needs room to drain a link
        drain = p.free_flow_speed / p.length_km
        if min(p.inflow_cap, p.outflow_cap) < drain:
            out.append(Violation(
                "cap-below-drain-rate", l.id,
                f"link {l.name}: flow capacity {min(p.inflow_cap, p.outflow_cap)} "
                f"< v_f/length = {drain:.4g} veh/min"))
    for l in network.links:
        if l.tail == l.head:
            out.append(Violation("self-loop", l.id, f"link {l.id} is a self loop"))
    for r in sorted(network.dummy_origins):
        outs = [l for l in network.out_links(r)]
        if len(outs) != 1 or outs[0].id not in network.origin_connectors:
            out.append(Violation("origin-connector", None,
                                 f"dummy origin {r} must have exactly one outgoing connector"))
    for s in sorted(network.dummy_destinations):
        ins = [l for l in network.in_links(s)]
        if len(ins) != 1 or ins[0].id not in network.destination_connectors:
            out.append(Violation("destination-connector", None,
                                 f"dummy destination {s} must have exactly one incoming connector"))
    for s in sorted(network.dummy_destinations):
        reach = network.reachable_to(s)
        for r in sorted(network.dummy_origins):
            if r not in reach:
                out.append(Violation("unreachable", None,
                                     f"destination {s} unreachable from origin {r}"))
    return out


# ---------------------------------------------------------------------------
# JSON document interchange

_DOC_UNITS = {
    "length": "km",
    "time": "min",
    "flow": "veh/min",
    "queue": "veh",
    "headway": "s",
}


def network_to_document(
    network: Network,
    gparams: GlobalParams | None = None,
    demand: DemandProfile | None = None,
) -> dict:
    def cap(x):
        return None if x == UNBOUNDED else x

    doc = {
        "units": dict(_DOC_UNITS),
        "nodes": sorted(network.nodes),
        "dummy_origins": sorted(network.dummy_origins),
        "dummy_destinations": sorted(network.dummy_destinations),
        "origin_connectors": sorted(network.origin_connectors),
        "destination_connectors": sorted(network.destination_connectors),
        "links": [
            {
                "id": l.id,
                "tail": l.tail,
                "head": l.head,
                "is_connector": l.is_connector,
                "free_flow_speed": cap(l.params.free_flow_speed),
                "length_km": l.params.length_km,
                "q_up_cap": cap(l.params.q_up_cap),
                "q_down_cap": cap(l.params.q_down_cap),
                "inflow_cap": cap(l.params.inflow_cap),
                "outflow_cap": cap(l.params.outflow_cap),
                "h_min_s": l.params.h_min_s,
                "h_max_s": cap(l.params.h_max_s),
            }
            for l in network.links
        ],
    }
    if gparams is not None:
        doc["global"] = {
            "veh_len_km": gparams.veh_len_km,
            "dt_min": gparams.dt_min,
            "n_intervals": gparams.n_intervals,
            "demand_horizon_min": gparams.demand_horizon_min,
            "end_c": gparams.end_c,
        }
    if demand is not None:
        doc["demand"] = {
            "n_demand": demand.n_demand,
            "entries": [
                {"origin": r, "destination": s, "rates": list(map(float, demand.rates[(r, s)]))}
                for (r, s) in demand.od_pairs
            ],
        }
    return doc


def network_from_document(doc: dict):
    def uncap(x):
        return UNBOUNDED if x is None else float(x)

    links = [
        Link(
            int(row["id"]),
            int(row["tail"]),
            int(row["head"]),
            LinkParams(
                free_flow_speed=uncap(row["free_flow_speed"]),
                length_km=float(row["length_km"]),
                q_up_cap=uncap(row["q_up_cap"]),
                q_down_cap=uncap(row["q_down_cap"]),
                inflow_cap=uncap(row["inflow_cap"]),
                outflow_cap=uncap(row["outflow_cap"]),
                h_min_s=float(row["h_min_s"]),
                h_max_s=uncap(row["h_max_s"]),
            ),
            is_connector=bool(row["is_connector"]),
        )
        for row in doc["links"]
    ]
    network = Network(
        nodes=set(doc["nodes"]),
        links=links,
        dummy_origins=set(doc["dummy_origins"]),
        dummy_destinations=set(doc["dummy_destinations"]),
        origin_connectors=set(doc["origin_connectors"]),
        destination_connectors=set(doc["destination_connectors"]),
    )
    gparams = None
    if "global" in doc:
        g = doc["global"]
        gparams = GlobalParams(
            veh_len_km=g["veh_len_km"],
            dt_min=g["dt_min"],
            n_intervals=int(g["n_intervals"]),
            demand_horizon_min=g["demand_horizon_min"],
            end_c=g.get("end_c", GlobalParams.end_c),
        )
    demand = None
    if "demand" in doc:
        d = doc["demand"]
        demand = DemandProfile(
            rates={
                (int(e["origin"]), int(e["destination"])): np.asarray(e["rates"], dtype=float)
                for e in d["entries"]
            },
            n_demand=int(d["n_demand"]),
        )
    return network, gparams, demand


def save_document(path, network, gparams=None, demand=None):
    with open(path, "w") as fh:
        json.dump(network_to_document(network, gparams, demand), fh, indent=1)


def load_document(path):
    with open(path) as fh:
        return network_from_document(json.load(fh))


# ---------------------------------------------------------------------------
# TNTP ingestion


def _read_tntp_metadata(lines, path):
    meta = {}
    i = 0
    for i, line in enumerate(lines):
        s = line.strip()
        if s == "<END OF METADATA>":
            return meta, i + 1
        if s.startswith("<"):
            if ">" not in s:
                raise TntpParseError(f"{path}:{i + 1}: malformed metadata line {s!r}")
            key, val = s.split(">", 1)
            meta[key[1:].strip()] = val.strip()
    return meta, 0 if not meta else i + 1


def load_tntp(
    net_path,
    trips_path,
    *,
    dt_min: float,
    demand_horizon_min: float,
    h_min_s: float = 0.5,
    h_max_s: float = 2.5,
    capacity_scale: float = 1.0 / 60.0,
    length_scale: float = 1.0,
    time_scale: float = 1.0,
    queue_cap_per_km: float = 200.0,
    demand_scale: float = 1.0,
) -> tuple[Network, DemandProfile]:
    """Read a TNTP net/trips file pair into a network plus demand profile.

    Column mapping: free-flow speed is length/free_flow_time after applying
    `length_scale` (file length units -> km) and `time_scale` (file time
    units -> min); inflow and outflow capacities both come from the capacity
    column times `capacity_scale` (default veh/h -> veh/min).  Queue
    capacities are not part of the format and default to
    `queue_cap_per_km * length`.  The static trip table is spread uniformly
    over the demand horizon.
    """
    with open(net_path) as fh:
        lines = fh.read().splitlines()
    meta, start = _read_tntp_metadata(lines, net_path)
    rows = []
    for idx in range(start, len(lines)):
        s = lines[idx].strip()
        if not s or s.startswith("~") or s.startswith("<"):
            continue
        s = s.rstrip(";").strip()
        parts = s.split()
        if len(parts) < 5:
            raise TntpParseError(
                f"{net_path}:{idx + 1}: expected at least 5 link columns, got {len(parts)}")
        try:
            tail, head = int(parts[0]), int(parts[1])
            cap, length, fft = float(parts[2]), float(parts[3]), float(parts[4])
        except ValueError as exc:
            raise TntpParseError(f"{net_path}:{idx + 1}: bad link row {s!r}: {exc}") from None
        rows.append((tail, head, cap, length, fft))
    if "NUMBER OF LINKS" in meta and len(rows) != int(meta["NUMBER OF LINKS"]):
        raise TntpParseError(
            f"{net_path}: header declares {meta['NUMBER OF LINKS']} links, found {len(rows)}")

    links = []
    nodes: set[int] = set()
    for i, (tail, head, cap, length, fft) in enumerate(rows):
        length_km = length * length_scale
        fft_min = fft * time_scale
        if length_km <= 0 or fft_min <= 0:
            raise TntpParseError(
                f"{net_path}: link {tail}->{head} needs positive length and free-flow time")
        links.append(Link(
            i, tail, head,
            LinkParams(
                free_flow_speed=length_km / fft_min,
                length_km=length_km,
                q_up_cap=queue_cap_per_km * length_km,
                q_down_cap=queue_cap_per_km * length_km,
                inflow_cap=cap * capacity_scale,
                outflow_cap=cap * capacity_scale,
                h_min_s=h_min_s,
                h_max_s=h_max_s,
            ),
        ))
        nodes.update((tail, head))
    if "NUMBER OF NODES" in meta and len(nodes) != int(meta["NUMBER OF NODES"]):
        raise TntpParseError(
            f"{net_path}: header declares {meta['NUMBER OF NODES']} nodes, found {len(nodes)}")

    trips = _read_tntp_trips(trips_path)
    origins = sorted({o for (o, d), v in trips.items() if v > 0})
    dests = sorted({d for (o, d), v in trips.items() if v > 0})
    network = attach_connectors(nodes, links, origins, dests)
    origin_dummy = {}
    for r in sorted(network.dummy_origins):
        origin_dummy[network.connector_of_origin(r).head] = r
    dest_dummy = {}
    for s in sorted(network.dummy_destinations):
        dest_dummy[network.connector_of_destination(s).tail] = s

    n1 = int(round(demand_horizon_min / dt_min))
    rates = {}
    for (o, d), veh in sorted(trips.items()):
        if veh <= 0 or o == d:
            continue
        rate = veh * demand_scale / demand_horizon_min
        rates[(origin_dummy[o], dest_dummy[d])] = np.full(n1, rate, dtype=float)
    return network, DemandProfile(rates=rates, n_demand=n1)


def _read_tntp_trips(trips_path) -> dict[tuple[int, int], float]:
    with open(trips_path) as fh:
        text = fh.read()
    if not text.strip():
        return {}
    lines = text.splitlines()
    meta, start = _read_tntp_metadata(lines, trips_path)
    trips: dict[tuple[int, int], float] = {}
    origin = None
    saw_block = False
    for idx in range(start, len(lines)):
        s = lines[idx].strip()
        if not s or s.startswith("~") or s.startswith("<"):
            continue
        if s.lower().startswith("origin"):
            try:
                origin = int(s.split()[1])
            except (IndexError, ValueError):
                raise TntpParseError(f"{trips_path}:{idx + 1}: bad origin header {s!r}") from None
            saw_block = True
            continue
        if origin is None:
            raise TntpParseError(f"{trips_path}:{idx + 1}: trip data before any Origin block")
        for chunk in s.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise TntpParseError(f"{trips_path}:{idx + 1}: bad trip entry {chunk!r}")
            dest_s, value_s = chunk.split(":", 1)
            try:
                dest, value = int(dest_s), float(value_s)
            except ValueError:
                raise TntpParseError(f"{trips_path}:{idx + 1}: bad trip entry {chunk!r}") from None
            trips[(origin, dest)] = trips.get((origin, dest), 0.0) + value
    if not saw_block:
        raise TntpParseError(f"{trips_path}: no Origin block found")
    return trips
