import numpy as np
import pytest

from headwayopt import maximin, sodta
from headwayopt.maximin import HeadwayField


class TestHeadwayField:
    def test_minimum_and_maximum_fields(self, small_net):
        network, gparams, _ = small_net
        hmin = HeadwayField.minimum(network, gparams)
        hmax = HeadwayField.maximum(network, gparams)
        assert hmin.values_s.shape == (6, 18)
        assert np.all(hmin.values_s == 0.5)
        assert np.all(hmax.values_s == 2.5)
        assert hmin.l1_norm == pytest.approx(0.5 * 6 * 18)

    def test_gap_stats_trivial(self, small_net):
        network, gparams, _ = small_net
        hmin = HeadwayField.minimum(network, gparams)
        gap, ratio = maximin.headway_gap_stats(hmin, hmin)
        assert gap == 0.0
        assert ratio == 1.0

    def test_gap_stats_shape_mismatch(self, small_net):
        network, gparams, _ = small_net
        hmin = HeadwayField.minimum(network, gparams)
        other = HeadwayField(np.ones((2, 3)))
        with pytest.raises(ValueError):
            maximin.headway_gap_stats(hmin, other)


class TestClosedForm:
    def test_congested_cells_pinned(self, small_net, solved_min):
        network, gparams, _ = small_net
        import copy
        state = copy.copy(solved_min.state)
        state.delta = np.ones_like(solved_min.state.delta)
        rep = maximin.maximin_headway(state, network, gparams,
                                      residual_tol=np.inf)
        assert np.all(rep.h_star.values_s == 0.5)
        assert np.all(rep.binding == maximin.TAG_CONGESTED)
        assert rep.mean_ratio == pytest.approx(1.0)

    def test_rejects_inconsistent_state(self, small_net, solved_min):
        network, gparams, _ = small_net
        x_bad = solved_min.solution.x.copy()
        x_bad[0] += 50.0
        bad_state = sodta.TrafficState(solved_min.system, x_bad)
        with pytest.raises(maximin.StateRejectedError):
            maximin.maximin_headway(bad_state, network, gparams)

    def test_lp_cross_check_agrees(self, maximin_result):
        assert maximin_result.lp_agrees is True

    def test_field_within_bounds_and_above_minimum(self, small_net, maximin_result):
        network, gparams, _ = small_net
        h = maximin_result.h_star.values_s
        assert np.all(h >= 0.5 - 1e-12)
        assert np.all(h <= 2.5 + 1e-12)
        assert maximin_result.mean_ratio >= 1.0

    def test_binding_tags_closed_set(self, maximin_result):
        allowed = {maximin.TAG_CONGESTED, maximin.TAG_BREAKPOINT,
                   maximin.TAG_SHOCKWAVE, maximin.TAG_HMAX}
        assert set(maximin_result.binding.ravel()) <= allowed

    def test_elementwise_maximality(self, small_net, solved_min, maximin_result):
        # bumping any non-capped cell runs into a model constraint
        network, gparams, demand = small_net
        h = maximin_result.h_star.values_s
        binding = maximin_result.binding
        rng = np.random.default_rng(8)
        cells = [(p, k) for p in range(6) for k in range(18)
                 if binding[p, k] != maximin.TAG_HMAX]
        for p, k in [cells[i] for i in rng.choice(len(cells), size=6, replace=False)]:
            bumped = h.copy()
            bumped[p, k] = min(2.5, bumped[p, k] * (1 + 2e-6))
            system = sodta.build_constraints(network, gparams, demand, bumped)
            res = sodta.residual_report(system, solved_min.solution.x)
            if binding[p, k] == maximin.TAG_CONGESTED:
                assert res["eq26"] > 1e-9
            else:
                assert max(res["eq25"], res["eq31"]) > 1e-9

    def test_norm_dominates_random_feasible_fields(self, small_net, solved_min,
                                                   maximin_result):
        network, gparams, demand = small_net
        h_star = maximin_result.h_star.values_s
        rng = np.random.default_rng(17)
        feasible_seen = 0
        for _ in range(100):
            beta = rng.random((6, 18))
            h = 0.5 + beta * (h_star - 0.5)
            if rng.random() < 0.3:
                # occasionally push one cell above the maximin value
                p, k = int(rng.integers(6)), int(rng.integers(18))
                h[p, k] = min(2.5, h_star[p, k] + rng.uniform(0.05, 0.5))
            system = sodta.build_constraints(network, gparams, demand, h)
            res = sodta.residual_report(system, solved_min.solution.x)
            if max(res.values()) <= 1e-6:
                feasible_seen += 1
                assert np.sum(h) <= np.sum(h_star) + 1e-6
        assert feasible_seen > 0

    def test_weights_require_positive(self, small_net, solved_min):
        network, gparams, _ = small_net
        with pytest.raises(ValueError):
            maximin.maximin_headway(solved_min.state, network, gparams,
                                    weights=np.zeros((6, 18)))

    def test_positive_weights_leave_field_unchanged(self, small_net, solved_min,
                                                    maximin_result):
        network, gparams, _ = small_net
        w = np.random.default_rng(3).uniform(0.5, 2.0, (6, 18))
        rep = maximin.maximin_headway(solved_min.state, network, gparams, weights=w)
        assert np.array_equal(rep.h_star.values_s, maximin_result.h_star.values_s)
        assert rep.objective == pytest.approx(float(np.sum(w * rep.h_star.values_s)))


class TestVerify:
    def test_minimum_field_trivially_preserved(self, small_net, solved_min):
        network, gparams, demand = small_net
        hmin = HeadwayField.minimum(network, gparams)
        ver = maximin.verify_optimality_preserved(
            hmin, network, gparams, demand, solved_min.ttt, solved_min.state)
        assert ver.ok
        assert ver.replay_max_residual < 1e-9

    def test_maximin_field_preserved(self, small_net, solved_min, maximin_result):
        network, gparams, demand = small_net
        ver = maximin.verify_optimality_preserved(
            maximin_result.h_star, network, gparams, demand,
            solved_min.ttt, solved_min.state)
        assert ver.ok
        assert abs(ver.ttt_resolved - solved_min.ttt) <= 1e-6 * solved_min.ttt
        assert ver.replay_max_residual <= 1e-6

    def test_perturbed_cell_detected(self, small_net, solved_min, maximin_result):
        network, gparams, demand = small_net
        h = maximin_result.h_star.values_s.copy()
        cells = np.argwhere(maximin_result.binding == maximin.TAG_BREAKPOINT)
        assert len(cells)
        p, k = cells[0]
        h[p, k] = min(2.5, h[p, k] * 1.02)
        system = sodta.build_constraints(network, gparams, demand, h)
        res = sodta.residual_report(system, solved_min.solution.x)
        assert res["eq25"] > 1e-8


def test_pipeline_deterministic(chain_case):
    network, gparams, demand = chain_case
    runs = []
    for _ in range(2):
        res = sodta.solve_fixed_headway(network, gparams, demand, 0.5)
        rep = maximin.maximin_headway(res.state, network, gparams)
        runs.append((res.ttt, rep.h_star.values_s.copy()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])
