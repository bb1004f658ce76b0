import numpy as np
import pytest

from headwayopt import hdq, hfd, network as netmod, sodta
from headwayopt.network import DemandProfile, GlobalParams, LinkParams

from conftest import make_chain_network


class TestQueueDefinitions:
    def test_downstream_zero_when_balanced(self):
        F = np.array([0.0, 2, 4, 6])
        assert hdq.downstream_queue(F, F, 3) == 0.0

    def test_downstream_direct_formula(self):
        F = np.array([0.0, 4, 10])
        V = np.array([0.0, 1, 4])
        assert hdq.downstream_queue(F, V, 2) == pytest.approx(6.0)

    def test_downstream_negative_raises(self):
        with pytest.raises(hdq.FlowConsistencyError):
            hdq.downstream_queue(np.array([0.0, 1.0]), np.array([0.0, 5.0]), 1)

    def test_upstream_before_shockwave_arrives(self):
        U = np.array([0.0, 3, 8, 12])
        F = np.array([0.0, 2, 5, 9])
        # k <= n_w: no space has propagated back, queue equals all of U
        assert hdq.upstream_queue(U, F, 3, 2) == pytest.approx(8.0)
        assert hdq.upstream_queue(U, F, 1, 2) == pytest.approx(8.0 - 2.0)

    def test_queues_match_interval_summation_oracle(self):
        rng = np.random.default_rng(4)
        dt = 2.0
        for _ in range(50):
            N = 12
            u = rng.uniform(0, 10, N + 1); u[0] = 0
            f = np.minimum(u, rng.uniform(0, 10, N + 1)); f[0] = 0
            v = np.minimum(f, rng.uniform(0, 10, N + 1)); v[0] = 0
            U = np.concatenate([[0], np.cumsum(u[1:]) * dt])
            F = np.concatenate([[0], np.cumsum(f[1:]) * dt])
            V = np.concatenate([[0], np.cumsum(v[1:]) * dt])
            n_w = int(rng.integers(1, 4))
            for k in range(1, N + 1):
                qd = hdq.downstream_queue(F, V, k)
                qd_direct = dt * (np.sum(f[1:k + 1]) - np.sum(v[1:k + 1]))
                assert qd == pytest.approx(qd_direct, abs=1e-12)
                qu = hdq.upstream_queue(U, F, n_w, k)
                lag = max(k - n_w, 0)
                qu_direct = dt * (np.sum(u[1:k + 1]) - np.sum(f[1:lag + 1]))
                assert qu == pytest.approx(qu_direct, abs=1e-12)


class TestFlowBounds:
    PARAMS = LinkParams(1.0, 3.0, 600, 600, 50, 60, 0.5, 2.5)

    def test_unconstrained_cases(self):
        u_max, v_max = hdq.flow_upper_bounds(self.PARAMS, q_up=100, q_down=5,
                                             f_lagged=3, f_now=7)
        assert (u_max, v_max) == (50, 60)

    def test_empty_buffer_limits_outflow(self):
        _, v_max = hdq.flow_upper_bounds(self.PARAMS, 0, 0, 0, 3.0)
        assert v_max == 3.0

    def test_full_upstream_queue_blocks(self):
        u_max, _ = hdq.flow_upper_bounds(self.PARAMS, 600, 1, 0.0, 5)
        assert u_max == 0.0


def test_vehicles_on_link_formula():
    assert hdq.vehicles_on_link(3.6, 10.0, 5.0) == pytest.approx(41.0)
    assert hdq.vehicles_on_link(3.6, 0.0, 0.0) == 0.0


class TestSimulate:
    def test_zero_demand_all_zero(self, small_net):
        network, gparams, _ = small_net
        dem0 = DemandProfile.constant({od: 0.0 for od in [(6, 8), (7, 8)]},
                                      gparams.n_demand)
        traj = hdq.simulate(network, gparams, dem0, 0.5)
        for arr in traj.per.values():
            assert np.max(np.abs(arr)) == 0.0

    def test_single_link_steady_state_density(self):
        # constant inflow below capacity settles at rho = u / v_f, the
        # steady point of the boundary-flow relation
        network = make_chain_network([3.0], v_f=1.0, cap=50.0, q_cap=1e5)
        gparams = GlobalParams(veh_len_km=0.004, dt_min=3.0, n_intervals=30,
                               demand_horizon_min=60.0)
        (r,) = sorted(network.dummy_origins)
        (s,) = network.dummy_destinations
        demand = DemandProfile.constant({(r, s): 20.0}, gparams.n_demand)
        traj = hdq.simulate(network, gparams, demand, 1.0)
        li = traj.link_pos[0]
        rho_late = traj.agg["rho"][li, 18]
        assert rho_late == pytest.approx(20.0 / 1.0, rel=1e-3)
        f_late = traj.agg["f"][li, 18]
        assert f_late == pytest.approx(20.0, rel=1e-3)

    def test_conservation_and_bounds_on_benchmark(self, small_net):
        network, gparams, demand = small_net
        traj = hdq.simulate(network, gparams, demand, 0.5)
        assert traj.report["conservation"] < 1e-9
        assert traj.report["prop2"] <= 1e-9
        assert traj.report.get("eq34", 0.0) <= 1e-9
        assert traj.report.get("eq35", 0.0) <= 1e-9
        # everything that entered eventually reaches the destination side
        total_in = 4000.0
        arrived = sum(traj.cumulative(l.id)[0][-1] for l in network.links
                      if l.id in network.destination_connectors)
        assert arrived == pytest.approx(total_in, abs=5.0)

    def test_aggregation_identities(self, small_net):
        network, gparams, demand = small_net
        traj = hdq.simulate(network, gparams, demand, 0.5)
        for kind in ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s"):
            agg = kind.replace("_s", "")
            assert np.max(np.abs(traj.agg[agg] - traj.per[kind].sum(axis=1))) < 1e-12

    def test_replay_of_optimizer_solution(self, small_net, solved_min):
        network, gparams, demand = small_net
        st = solved_min.state
        sched = {k: st.per[k] for k in ("u_s", "f_s", "v_s")}
        traj = hdq.simulate(network, gparams, demand, 0.5, schedules=sched)
        assert max(traj.report.values()) <= 1e-6
        assert np.max(np.abs(traj.per["rho_s"] - st.per["rho_s"])) < 1e-9
        assert np.max(np.abs(traj.per["qD_s"] - st.per["qD_s"])) < 1e-9
        assert np.max(np.abs(traj.per["qU_s"] - st.per["qU_s"])) < 1e-9

    def test_split_routing_normalization(self):
        with pytest.raises(ValueError):
            hdq.SplitRouting({(1, 9): {0: 0.0}})
        r = hdq.SplitRouting({(1, 9): {0: 2.0, 1: 6.0}})
        assert r.splits[(1, 9)] == {0: 0.25, 1: 0.75}


def make_free_flow_trajectory(rng, n_intervals=16):
    """Synthetic single-link trajectory satisfying the reduction premise
    u(k - m) = f(k) exactly, with m = free-flow time in intervals."""
    dt = 2.0
    v_f = 1.5
    m = int(rng.integers(1, 4))
    length = v_f * m * dt
    h_s = float(rng.choice([0.6, 0.9, 1.2]))
    network = make_chain_network([length], v_f=v_f, cap=1e6, q_cap=1e6, h_min_s=0.5)
    gparams = GlobalParams(veh_len_km=0.004, dt_min=dt, n_intervals=n_intervals,
                           demand_horizon_min=dt * 4)
    nl = len(network.links)
    per = {kind: np.zeros((nl, 1, n_intervals + 1)) for kind in
           ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s")}
    li = 1  # physical link position in network.links order
    links = list(network.links)
    li = next(i for i, l in enumerate(links) if not l.is_connector)
    u = np.zeros(n_intervals + 1)
    u[1:8] = rng.uniform(0, 8, 7)
    f = np.zeros(n_intervals + 1)
    for k in range(1, n_intervals + 1):
        f[k] = u[k - m] if k - m >= 1 else 0.0
    v = np.zeros(n_intervals + 1)
    served = 0.0
    for k in range(1, n_intervals + 1):
        stock = served + f[k] * dt
        v[k] = rng.uniform(0, 1) * stock / dt
        served = stock - v[k] * dt
    per["u_s"][li, 0] = u
    per["f_s"][li, 0] = f
    per["v_s"][li, 0] = v
    U = np.concatenate([[0], np.cumsum(u[1:]) * dt])
    F = np.concatenate([[0], np.cumsum(f[1:]) * dt])
    V = np.concatenate([[0], np.cumsum(v[1:]) * dt])
    n_w = hfd.shockwave_steps(h_s, dt, 0.004, length)
    for k in range(1, n_intervals + 1):
        per["rho_s"][li, 0, k] = (U[k] - F[k]) / length
        per["qD_s"][li, 0, k] = hdq.downstream_queue(F, V, k)
        per["qU_s"][li, 0, k] = hdq.upstream_queue(U, F, n_w, k)
    n_phys = len(network.physical_links)
    traj = hdq.Trajectory(network, gparams, network.destinations,
                          h_s=np.full((n_phys, n_intervals), h_s),
                          n_w=np.full((n_phys, n_intervals), n_w), per=per)
    return traj


class TestDqReduction:
    def test_empty_trajectory_zero_deviation(self):
        network = make_chain_network([3.0], v_f=1.0)
        gparams = GlobalParams(veh_len_km=0.004, dt_min=3.0, n_intervals=8,
                               demand_horizon_min=3.0)
        nl = len(network.links)
        per = {kind: np.zeros((nl, 1, 9)) for kind in
               ("rho_s", "u_s", "f_s", "v_s", "qD_s", "qU_s")}
        traj = hdq.Trajectory(network, gparams, network.destinations,
                              h_s=np.full((1, 8), 1.0), n_w=np.ones((1, 8), dtype=int),
                              per=per)
        dev = hdq.dq_reduction_check(traj)
        assert dev["down_deviation"] == 0.0
        assert dev["up_deviation"] == 0.0

    def test_free_flow_identity(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            traj = make_free_flow_trajectory(rng)
            dev = hdq.dq_reduction_check(traj)
            assert dev["down_deviation"] <= 1e-9
            assert dev["up_deviation"] <= 1e-9

    def test_congested_flow_area_breaks_reduction(self):
        rng = np.random.default_rng(1)
        traj = make_free_flow_trajectory(rng)
        # violate the premise: boundary flow lags the shifted inflow
        li = next(i for i, l in enumerate(traj.links) if not l.is_connector)
        traj.per["f_s"][li, 0, 5] *= 0.5
        traj.agg = {}
        traj.__post_init__()
        with pytest.raises(hdq.DqAssumptionError):
            hdq.dq_reduction_check(traj)

    def test_time_varying_headway_rejected(self):
        rng = np.random.default_rng(2)
        traj = make_free_flow_trajectory(rng)
        traj.n_w[0, -1] += 1
        with pytest.raises(hdq.DqAssumptionError):
            hdq.dq_reduction_check(traj)
