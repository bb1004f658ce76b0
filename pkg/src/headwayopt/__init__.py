"""Headway-aware system-optimal dynamic traffic assignment (SO-DTA) toolkit.

The package solves SO-DTA on road networks where every vehicle is automated
and the time headway on each link and time interval is a control variable.
It provides:

* a headway-dependent fundamental diagram and double-queue link model,
* a sparse MILP formulation of the discretized SO-DTA problem,
* a built-in bounded-variable simplex / branch-and-bound solver,
* the maximin headway post-optimization (largest headway field that keeps
  the SO-DTA optimum intact),
* KKT-based sensitivity analysis of total travel time w.r.t. headway and a
  gradient-descent headway search,
* a constructive feasibility certificate, and
* a command line driver for scenario runs and parameter sweeps.

Units throughout: km, minutes, vehicles.  Headways cross all public
interfaces in seconds and are converted to minutes exactly once (see
:mod:`headwayopt.units`).
"""

from .network import (
    GlobalParams,
    DemandProfile,
    Link,
    LinkParams,
    Network,
    build_small_network,
    load_tntp,
    validate,
)

__all__ = [
    "GlobalParams",
    "DemandProfile",
    "Link",
    "LinkParams",
    "Network",
    "build_small_network",
    "load_tntp",
    "validate",
]

__version__ = "0.1.0"
