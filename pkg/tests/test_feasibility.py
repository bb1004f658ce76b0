import math
from dataclasses import replace

import numpy as np
import pytest

from headwayopt import feasibility as feas, hfd, sodta
from headwayopt.network import DemandProfile, GlobalParams

from conftest import make_chain_network


def chain_instance(lengths, rate, t1, dt, v_f=1.0, cap=40.0, q_cap=500.0):
    network = make_chain_network(lengths, v_f=v_f, cap=cap, q_cap=q_cap)
    gparams = GlobalParams(veh_len_km=0.004, dt_min=dt, n_intervals=10,
                           demand_horizon_min=t1)
    (r,) = sorted(network.dummy_origins)
    (s,) = network.dummy_destinations
    demand = DemandProfile.constant({(r, s): rate}, gparams.n_demand)
    return network, gparams, demand


class TestHorizonBound:
    def test_zero_demand_gives_demand_horizon(self):
        network, gparams, _ = chain_instance([2.0, 3.0], 10.0, 6.0, 2.0)
        demand = DemandProfile.constant({}, gparams.n_demand)
        plan = feas.FeasibilityPlan({}, gparams.demand_horizon_min)
        assert feas.feasibility_horizon(network, demand, plan) == 6.0

    def test_two_link_hand_computation(self):
        network, gparams, demand = chain_instance([2.0, 3.0], 10.0, 6.0, 2.0,
                                                  v_f=1.0, cap=40.0, q_cap=500.0)
        plan = feas.default_plan(network, gparams, demand)
        (odp,) = plan.per_od.values()
        total = 10.0 * 6.0
        assert odp.total_demand == pytest.approx(total)
        assert odp.n_batches == 1
        B = total
        lo = max(1.0 / 2.0, 1.0 / 3.0)
        hi = min(40.0, 40.0, hfd.max_flow(2.5, 1.0, 0.004))
        F_B = lo + 0.5 * (hi - lo)
        T_B = B / F_B
        t1 = T_B + (2.0 / 1.0) * math.log(2.0 * F_B / 1.0)
        t2 = T_B + (3.0 / 1.0) * math.log(3.0 * F_B / 1.0)
        assert odp.release_rate == pytest.approx(F_B)
        assert odp.path_time == pytest.approx(t1 + t2)
        assert feas.feasibility_horizon(network, demand, plan) == \
            pytest.approx(6.0 + t1 + t2)

    def test_bound_linear_in_batches(self):
        net1, gp1, dem1 = chain_instance([2.0, 3.0], 30.0, 30.0, 2.0, q_cap=100.0)
        plan1 = feas.default_plan(net1, gp1, dem1)
        dem2 = DemandProfile.constant(
            {od: 60.0 for od in dem1.od_pairs}, gp1.n_demand)
        plan2 = feas.default_plan(net1, gp1, dem2)
        (p1,) = plan1.per_od.values()
        (p2,) = plan2.per_od.values()
        assert p2.n_batches == 2 * p1.n_batches
        # equal batch sizes, so per-batch path time is identical and the
        # path term doubles
        b1 = feas.feasibility_horizon(net1, dem1, plan1) - gp1.demand_horizon_min
        b2 = feas.feasibility_horizon(net1, dem2, plan2) - gp1.demand_horizon_min
        assert b2 == pytest.approx(2 * b1, rel=1e-12)

    def test_drain_term_clamps_for_thin_flow(self):
        # release rate below v_f/len would make the log negative; the
        # passage time then equals the release time alone
        network, gparams, demand = chain_instance([2.0], 1.0, 4.0, 2.0)
        plan = feas.default_plan(network, gparams, demand, rate_position=0.0)
        (odp,) = plan.per_od.values()
        assert odp.passage_times[0] == pytest.approx(odp.release_time)

    def test_no_path_errors(self):
        network, gparams, demand = chain_instance([2.0, 3.0], 10.0, 6.0, 2.0)
        bad_od = {(list(network.dummy_destinations)[0],
                   list(network.dummy_origins)[0]): np.full(gparams.n_demand, 5.0)}
        with pytest.raises(feas.PlanError):
            feas.default_plan(network, gparams,
                              DemandProfile(bad_od, gparams.n_demand))


def sized_for_construction(network, gparams, demand):
    plan = feas.default_plan(network, gparams, demand)
    need = feas.discrete_horizon_bound(network, gparams, plan)
    n = int(math.ceil(need / gparams.dt_min)) + 2
    return replace(gparams, n_intervals=n), plan


class TestConstruction:
    def test_zero_demand_all_zero(self):
        network, gparams, _ = chain_instance([2.0, 3.0], 10.0, 6.0, 2.0)
        demand = DemandProfile.constant({}, gparams.n_demand)
        state, system = feas.construct_feasible_solution(network, gparams, demand)
        assert np.max(np.abs(state.x)) == 0.0

    def test_full_residual_replay(self):
        network, gparams, demand = chain_instance([2.0, 3.0], 8.0, 6.0, 2.0)
        gp2, plan = sized_for_construction(network, gparams, demand)
        state, system = feas.construct_feasible_solution(network, gp2, demand, plan)
        res = sodta.residual_report(system, state.x, state)
        assert max(res.values()) <= 1e-6

    def test_steady_phase_density_is_rate_over_speed(self):
        # long single batch so the fill phase settles onto the plateau
        network, gparams, demand = chain_instance([3.0], 12.0, 20.0, 2.0,
                                                  v_f=1.5, q_cap=400.0)
        gp2, plan = sized_for_construction(network, gparams, demand)
        state, _ = feas.construct_feasible_solution(network, gp2, demand, plan)
        (odp,) = plan.per_od.values()
        li = state.link_pos[0]
        rho = state.agg["rho"][li]
        u = state.agg["u"][li]
        steady = [k for k in range(2, gp2.n_intervals)
                  if abs(u[k] - odp.release_rate) < 1e-9
                  and abs(u[k - 1] - odp.release_rate) < 1e-9
                  and abs(rho[k] - rho[k - 1]) < 1e-3 * rho[k]]
        assert steady, "no steady loading interval found"
        for k in steady:
            assert rho[k] == pytest.approx(odp.release_rate / 1.5, rel=2e-2)

    def test_horizon_too_short_carries_bound(self):
        network, gparams, demand = chain_instance([2.0, 3.0], 8.0, 6.0, 2.0)
        plan = feas.default_plan(network, gparams, demand)
        with pytest.raises(feas.HorizonTooShortError) as exc:
            feas.construct_feasible_solution(network, gparams, demand, plan)
        assert exc.value.horizon_bound == pytest.approx(
            feas.feasibility_horizon(network, demand, plan))

    def test_certificate_dominates_optimum(self):
        network, gparams, demand = chain_instance([2.0, 3.0], 8.0, 6.0, 2.0)
        gp2, plan = sized_for_construction(network, gparams, demand)
        state, _ = feas.construct_feasible_solution(network, gp2, demand, plan)
        ttt_c = sodta.total_travel_time(state, gp2, network)
        opt = sodta.solve_fixed_headway(network, gp2, demand, 0.5)
        assert ttt_c >= opt.ttt - 1e-6 * opt.ttt

    def test_plan_document_fields(self):
        network, gparams, demand = chain_instance([2.0, 3.0], 8.0, 6.0, 2.0)
        plan = feas.default_plan(network, gparams, demand)
        doc = plan.to_document()
        assert doc["od_plans"][0]["n_batches"] >= 1
        assert doc["od_plans"][0]["release_rate_veh_min"] > 0
