"""Gradient-based headway search as a baseline.

Starting from a mid-range uniform field, differentiate total travel time
through the optimality conditions of the frozen-regime program and walk
downhill.  The trace settles well above the minimum-headway optimum, which
is the point of solving the control problem analytically instead.
"""

import numpy as np

from headwayopt import maximin, network, sensitivity, sodta

net, gparams, demand = network.build_small_network()
h_min = maximin.HeadwayField.minimum(net, gparams)
best = sodta.solve_fixed_headway(net, gparams, demand, h_min)
print(f"minimum-headway optimum: {best.ttt:,.1f} veh*min")

trace = sensitivity.sensitivity_descent(
    net, gparams, demand, np.full((6, 18), 1.05), eta=2e-4, iters=6)
print(f"\n{'iter':>4} {'TTT':>12} {'|grad|_inf':>11} {'step':>9} accepted")
for row in trace.rows:
    print(f"{row['iteration']:4d} {row['ttt']:12.1f} {row['grad_inf']:11.2f} "
          f"{row['step']:9.2e} {row['accepted']}")
print(f"\nfinal TTT {trace.final_ttt:,.1f} stays "
      f"{trace.final_ttt - best.ttt:,.1f} above the optimum")
