"""How the headway reshapes a link's flow-density diagram.

Larger headways shrink the free-flow region, cap the peak flow lower, and
slow the backward propagation of freed space (more shockwave steps).
"""


from headwayopt import hfd
from headwayopt.network import LinkParams

link = LinkParams(free_flow_speed=1.2, length_km=3.6, q_up_cap=600,
                  q_down_cap=600, inflow_cap=50, outflow_cap=50,
                  h_min_s=0.5, h_max_s=2.5)
L = 0.004

print(f"{'h (s)':>6} {'critical density':>17} {'peak flow':>10} {'shock steps':>12}")
for h in (0.5, 1.0, 1.5, 2.0, 2.5):
    rho_c = hfd.critical_density(h, link.free_flow_speed, L)
    fmax = hfd.max_flow(h, link.free_flow_speed, L)
    n_w = hfd.shockwave_steps(h, 5.0, L, link.length_km)
    print(f"{h:6.1f} {rho_c:14.1f} /km {fmax:7.1f}/min {n_w:12d}")

print("\nflow at sampled densities (veh/min), h = 0.5 s vs 2.5 s:")
for rho in (20, 60, 120, 200, 249):
    f_small = hfd.flow_fd(rho, 0.5, link, L)
    f_large = hfd.flow_fd(rho, 2.5, link, L)
    print(f"  rho {rho:4d}: {f_small:7.2f}  vs {f_large:7.2f}")

print("\none-interval closed form (density 30 /km, inflow 45/min):")
for h in (0.5, 1.5, 2.5):
    regime, f, rho = hfd.resolve_regime(30.0, 45.0, h, link, 5.0, L)
    print(f"  h={h:.1f}s -> regime {'congested' if regime else 'free'}, "
          f"boundary flow {f:.2f}, new density {rho:.1f}")
