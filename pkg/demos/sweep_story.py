"""Sensitivity of the maximin-minimum headway gap to demand and to the
minimum headway requirement.

The safety margin (the average amount each headway can grow without losing
optimality) shrinks as demand grows, and stays fairly level as the minimum
headway requirement moves.
"""


from headwayopt import maximin, network, sodta
from headwayopt.network import DemandProfile

net, gparams, base_demand = network.build_small_network()
h_min = maximin.HeadwayField.minimum(net, gparams)

print("demand sweep (veh/min per O-D):")
print(f"{'demand':>8} {'TTT':>10} {'mean gap (s)':>13}")
for d in (30.0, 40.0, 50.0, 60.0, 70.0):
    demand = DemandProfile.constant({od: d for od in base_demand.od_pairs},
                                    gparams.n_demand)
    res = sodta.solve_fixed_headway(net, gparams, demand, h_min)
    rep = maximin.maximin_headway(res.state, net, gparams)
    print(f"{d:8.0f} {res.ttt:10.1f} {rep.mean_gap_s:13.3f}")

print("\nminimum-headway sweep (demand 50 veh/min):")
print(f"{'h_min (s)':>10} {'TTT':>10} {'mean gap (s)':>13}")
for h in (0.3, 0.5, 0.7, 0.9, 1.1):
    field = maximin.HeadwayField.uniform(net, gparams, h)
    try:
        res = sodta.solve_fixed_headway(net, gparams, base_demand, field)
    except sodta.InfeasibleProblemError as exc:
        print(f"{h:10.2f}  infeasible at this horizon ({exc})")
        continue
    rep = maximin.maximin_headway(res.state, net, gparams)
    print(f"{h:10.2f} {res.ttt:10.1f} {rep.mean_gap_s:13.3f}")
