import math

import numpy as np
import pytest

from headwayopt import hfd
from headwayopt.network import LinkParams
from headwayopt.units import headway_s_to_min


def params(v_f=1.2, length=3.6, h_min=0.5, h_max=2.5):
    return LinkParams(free_flow_speed=v_f, length_km=length, q_up_cap=600,
                      q_down_cap=600, inflow_cap=50, outflow_cap=50,
                      h_min_s=h_min, h_max_s=h_max)


L_VEH = 0.005


class TestFlowFd:
    def test_empty_link(self):
        assert hfd.flow_fd(0.0, 0.5, params(), L_VEH) == 0.0

    def test_jam_density(self):
        assert hfd.flow_fd(1.0 / L_VEH, 0.5, params(), L_VEH) == pytest.approx(0.0)

    def test_branches_agree_at_breakpoint(self):
        p = params(v_f=1.0)
        rho_c = hfd.critical_density(0.5, 1.0, L_VEH)
        free = p.free_flow_speed * rho_c
        cong = (1 - rho_c * L_VEH) / headway_s_to_min(0.5)
        assert free == pytest.approx(cong, rel=1e-12)
        assert hfd.flow_fd(rho_c, 0.5, p, L_VEH) == pytest.approx(free, rel=1e-12)

    def test_continuity_near_breakpoint(self):
        p = params()
        rho_c = hfd.critical_density(0.5, p.free_flow_speed, L_VEH)
        for eps in (1e-3, 1e-6, 1e-9):
            lo = hfd.flow_fd(rho_c - eps, 0.5, p, L_VEH)
            hi = hfd.flow_fd(rho_c + eps, 0.5, p, L_VEH)
            assert abs(lo - hi) < 200 * eps

    def test_domain_error_above_jam(self):
        with pytest.raises(hfd.DomainError):
            hfd.flow_fd(1.0 / L_VEH + 1.0, 0.5, params(), L_VEH)


class TestCriticalDensity:
    def test_arithmetic(self):
        # 0.5 s = 1/120 min; 1.2/120 + 0.005 = 0.015 -> 66.67 veh/km
        val = hfd.critical_density(0.5, 1.2, 0.005)
        assert val == pytest.approx(1.0 / 0.015, rel=1e-12)
        assert val == pytest.approx(66.6667, rel=1e-4)

    def test_vanishing_headway_limit(self):
        assert hfd.critical_density(1e-12, 1.2, L_VEH) == pytest.approx(1 / L_VEH, rel=1e-6)

    def test_monotone_in_headway(self):
        vals = [hfd.critical_density(h, 1.2, L_VEH) for h in (0.5, 1.0, 1.5, 2.5)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestShockwaveSteps:
    def test_ratio_above_one(self):
        # 3.6 km, 0.5 s, 5 min, 5 m: ratio 1.2
        assert hfd.shockwave_steps(0.5, 5.0, 0.005, 3.6) == 1

    def test_exact_integer_boundary(self):
        # ratio exactly 6: count stays at 6 (6*cell <= len*h, 7*cell > len*h)
        assert hfd.shockwave_steps(2.5, 5.0, 0.005, 3.6) == 6

    def test_defining_inequalities(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            h = float(rng.uniform(0.3, 3.0))
            dt = float(rng.uniform(1.0, 6.0))
            L = float(rng.uniform(0.003, 0.008))
            length = float(rng.uniform(1.0, 6.0))
            hm = headway_s_to_min(h)
            if not dt * L < length * hm:
                continue
            n = hfd.shockwave_steps(h, dt, L, length)
            assert n >= 1
            assert n * dt * L / hm <= length * (1 + 1e-9)
            assert (n + 1) * dt * L / hm > length * (1 - 1e-9)

    def test_precondition_error(self):
        with pytest.raises(hfd.DomainError):
            hfd.shockwave_steps(0.5, 5.0, 0.05, 3.0)

    def test_larger_headway_more_steps(self):
        n1 = hfd.shockwave_steps(0.5, 5.0, 0.004, 3.6)
        n2 = hfd.shockwave_steps(2.5, 5.0, 0.004, 3.6)
        assert n2 > n1


class TestDensityUpdate:
    def test_equilibrium(self):
        assert hfd.density_update(10.0, 30.0, 30.0, 5.0, 3.6) == pytest.approx(10.0)

    def test_arithmetic(self):
        # 0 + 5*(50-0)/3.6 = 69.44
        assert hfd.density_update(0.0, 50.0, 0.0, 5.0, 3.6) == pytest.approx(69.4444, rel=1e-5)

    def test_negative_density_error(self):
        with pytest.raises(hfd.DomainError):
            hfd.density_update(1.0, 0.0, 50.0, 5.0, 3.6)


class TestResolveRegime:
    def test_empty_link_stays_empty(self):
        reg, f, rho = hfd.resolve_regime(0.0, 0.0, 0.5, params(), 5.0, L_VEH)
        assert (reg, f, rho) == (0, 0.0, 0.0)

    def test_matches_bisection_oracle(self):
        rng = np.random.default_rng(7)
        p = params(v_f=1.0, length=3.0)
        dt = 5.0
        for _ in range(400):
            h = float(rng.uniform(0.5, 2.5))
            rho_prev = float(rng.uniform(0.0, 0.9 / L_VEH))
            u = float(rng.uniform(0.0, 60.0))
            # skip draws that would exceed jam within the interval
            if rho_prev + dt * u / p.length_km > 1.0 / L_VEH:
                continue
            reg, f, rho = hfd.resolve_regime(rho_prev, u, h, p, dt, L_VEH)
            f_oracle = _bisect_regime(rho_prev, u, h, p, dt, L_VEH)
            assert f == pytest.approx(f_oracle, rel=1e-9, abs=1e-9)
            assert rho == pytest.approx(rho_prev + dt * (u - f) / p.length_km,
                                        rel=1e-9, abs=1e-12)

    def test_tie_reports_congested(self):
        # construct inputs whose coupled solution lands exactly on the
        # breakpoint: then both branches agree and the regime flag is 1
        p = params(v_f=1.0, length=3.0)
        dt = 5.0
        h = 1.2
        rho_c = hfd.critical_density(h, p.free_flow_speed, L_VEH)
        # free closed form: rho = (len*rho_prev + dt*u)/(len + dt*v_f) = rho_c
        rho_prev = 0.5 * rho_c
        u = (rho_c * (p.length_km + dt * p.free_flow_speed) - p.length_km * rho_prev) / dt
        reg, f, rho = hfd.resolve_regime(rho_prev, u, h, p, dt, L_VEH)
        assert reg == 1
        assert rho == pytest.approx(rho_c, rel=1e-9)

    def test_flow_monotone_in_headway(self):
        # smaller headway never produces less boundary flow
        rng = np.random.default_rng(11)
        p = params(v_f=1.1, length=3.3)
        dt = 5.0
        for _ in range(1000):
            h1, h2 = np.sort(rng.uniform(0.5, 2.5, 2))
            rho_prev = float(rng.uniform(0.0, 0.8 / L_VEH))
            u = float(rng.uniform(0.0, 50.0))
            if rho_prev + dt * u / p.length_km > 1.0 / L_VEH:
                continue
            _, f1, _ = hfd.resolve_regime(rho_prev, u, float(h1), p, dt, L_VEH)
            _, f2, _ = hfd.resolve_regime(rho_prev, u, float(h2), p, dt, L_VEH)
            assert f1 >= f2 - 1e-9


def _bisect_regime(rho_prev, u, h_s, p, dt, L):
    """Independent root find on f = fd(rho_prev + dt*(u-f)/len)."""
    def g(f):
        rho = rho_prev + dt * (u - f) / p.length_km
        return f - hfd.flow_fd(min(max(rho, 0.0), 1.0 / L), h_s, p, L)

    lo, hi = 0.0, p.free_flow_speed / L + u
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def test_headway_effects_on_diagram():
    # larger headway: smaller critical density, smaller peak flow, more
    # shockwave steps
    v_f, L = 1.2, 0.004
    rc = [hfd.critical_density(h, v_f, L) for h in (0.5, 1.5, 2.5)]
    fm = [hfd.max_flow(h, v_f, L) for h in (0.5, 1.5, 2.5)]
    nw = [hfd.shockwave_steps(h, 5.0, L, 3.6) for h in (0.5, 1.5, 2.5)]
    assert rc[0] > rc[1] > rc[2]
    assert fm[0] > fm[1] > fm[2]
    assert nw[0] < nw[1] < nw[2]
