import numpy as np
import pytest

from headwayopt import maximin, network as netmod, sodta


@pytest.fixture(scope="session")
def small_net():
    return netmod.build_small_network()


@pytest.fixture(scope="session")
def solved_min(small_net):
    """Minimum-headway optimum of the benchmark network (shared, expensive)."""
    network, gparams, demand = small_net
    h_min = maximin.HeadwayField.minimum(network, gparams)
    return sodta.solve_fixed_headway(network, gparams, demand, h_min)


@pytest.fixture(scope="session")
def maximin_result(small_net, solved_min):
    network, gparams, _demand = small_net
    return maximin.maximin_headway(solved_min.state, network, gparams,
                                   lp_cross_check=True)


def make_chain_network(lengths_km, v_f=1.0, cap=40.0, q_cap=500.0,
                       h_min_s=0.5, h_max_s=2.5):
    """A single path of physical links with one origin and one destination."""
    nodes = set(range(1, len(lengths_km) + 2))
    links = []
    for i, length in enumerate(lengths_km):
        links.append(netmod.Link(
            i, i + 1, i + 2,
            netmod.LinkParams(
                free_flow_speed=v_f, length_km=length, q_up_cap=q_cap,
                q_down_cap=q_cap, inflow_cap=cap, outflow_cap=cap,
                h_min_s=h_min_s, h_max_s=h_max_s),
        ))
    return netmod.attach_connectors(nodes, links, origins=[1],
                                    destinations=[len(lengths_km) + 1])


@pytest.fixture(scope="session")
def chain_case():
    """Small single-path instance: 2 links, cheap to solve."""
    network = make_chain_network([2.4, 3.0], v_f=1.2, cap=30.0)
    gparams = netmod.GlobalParams(veh_len_km=0.004, dt_min=3.0, n_intervals=14,
                                  demand_horizon_min=9.0)
    (r,) = sorted(network.dummy_origins)
    (s,) = network.dummy_destinations
    demand = netmod.DemandProfile.constant({(r, s): 20.0}, gparams.n_demand)
    return network, gparams, demand
