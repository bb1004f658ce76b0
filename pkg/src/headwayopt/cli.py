"""Command line driver: scenario runs, sweeps, CSV/JSON result files.

Subcommands
    solve    solve the traffic assignment at the minimum headway field
    maximin  minimum-headway solve, maximin extraction, preservation check
    descend  gradient-descent headway search from a starting field
    sweep    repeat the maximin pipeline over a demand or h_min range

Every run writes into its own output directory: `config.json` (full echo of
the effective configuration), `report.json`, `trajectory.csv` (one row per
link, destination and interval), and a per-link `headway_summary.csv`;
sweeps add `sweep.csv`, descents add `descent.csv`.  All numbers in the
files come from library calls; the CLI only formats.

Exit codes: 0 success, 2 infeasible instance, 3 solver failure,
4 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import feasibility, lp, maximin, network as netmod, sensitivity, sodta

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3
EXIT_CONFIG = 4


class ConfigError(ValueError):
    pass


def _fmt(x):
    if isinstance(x, float):
        return format(x + 0.0 if x != 0 else 0.0, ".10g")
    return x


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


TRAJECTORY_COLUMNS = ["link", "tail", "head", "destination", "k",
                      "rho_s", "qD_s", "qU_s", "u_s", "f_s", "v_s",
                      "rho", "qD", "qU", "u", "f", "v"]


def load_scenario(args):
    src = args.network
    if src == "small":
        network, gparams, demand = netmod.build_small_network()
    elif src.startswith("tntp:"):
        try:
            net_path, trips_path = src[5:].split(",", 1)
        except ValueError:
            raise ConfigError("tntp source must be tntp:NET_FILE,TRIPS_FILE")
        if args.dt_min is None or args.horizon_min is None or args.demand_horizon_min is None:
            raise ConfigError("tntp networks need --dt-min, --horizon-min and "
                              "--demand-horizon-min")
        gparams = netmod.GlobalParams(
            dt_min=args.dt_min,
            n_intervals=int(round(args.horizon_min / args.dt_min)),
            demand_horizon_min=args.demand_horizon_min,
        )
        network, demand = netmod.load_tntp(
            net_path, trips_path,
            dt_min=gparams.dt_min,
            demand_horizon_min=gparams.demand_horizon_min,
            demand_scale=args.demand_scale,
        )
        gparams = replace(gparams, veh_len_km=netmod.resolve_vehicle_length(
            network, gparams.dt_min))
    else:
        network, gparams, demand = netmod.load_document(src)
        if gparams is None:
            raise ConfigError(f"document {src} carries no global parameters")
        if demand is None:
            raise ConfigError(f"document {src} carries no demand")
    if args.dt_min is not None and src != "small" and not src.startswith("tntp:"):
        gparams = replace(gparams, dt_min=args.dt_min)
    if args.horizon_min is not None:
        gparams = replace(gparams, n_intervals=int(round(args.horizon_min / gparams.dt_min)))
    if args.demand_horizon_min is not None:
        gparams = replace(gparams, demand_horizon_min=args.demand_horizon_min)
    if args.veh_length_km is not None:
        gparams = replace(gparams, veh_len_km=args.veh_length_km)
    if args.h_min_s is not None or args.h_max_s is not None:
        links = []
        for l in network.links:
            if l.is_connector:
                links.append(l)
                continue
            p = l.params
            p = replace(p,
                        h_min_s=args.h_min_s if args.h_min_s is not None else p.h_min_s,
                        h_max_s=args.h_max_s if args.h_max_s is not None else p.h_max_s)
            links.append(replace(l, params=p))
        network = netmod.Network(network.nodes, links, network.dummy_origins,
                                 network.dummy_destinations, network.origin_connectors,
                                 network.destination_connectors)
    if args.demand_rate is not None:
        demand = netmod.DemandProfile.constant(
            {od: args.demand_rate for od in demand.od_pairs}, gparams.n_demand)
    return network, gparams, demand


def echo_config(args, gparams, out_dir):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    cfg["effective_veh_len_km"] = gparams.veh_len_km
    cfg["effective_n_intervals"] = gparams.n_intervals
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)


def _dump_solve(out_dir, result, network, gparams, extra=None):
    rows = result.state.to_trajectory_rows()
    write_csv(out_dir / "trajectory.csv", rows, TRAJECTORY_COLUMNS)
    report = dict(result.report)
    if extra:
        report.update(extra)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True, default=float)


def _headway_summary(out_dir, network, h_field, h_min_field, binding=None):
    rows = []
    phys = network.physical_links
    for p, l in enumerate(phys):
        rows.append({
            "link": l.id,
            "name": l.name,
            "h_min_mean_s": float(np.mean(h_min_field.values_s[p])),
            "h_mean_s": float(np.mean(h_field.values_s[p])),
        })
    write_csv(out_dir / "headway_summary.csv", rows,
              ["link", "name", "h_min_mean_s", "h_mean_s"])
    if binding is not None:
        cells = []
        for p, l in enumerate(phys):
            for k in range(h_field.values_s.shape[1]):
                cells.append({
                    "link": l.id, "name": l.name, "k": k + 1,
                    "h_min_s": float(h_min_field.values_s[p, k]),
                    "h_star_s": float(h_field.values_s[p, k]),
                    "binding": binding[p, k],
                })
        write_csv(out_dir / "headway_cells.csv", cells,
                  ["link", "name", "k", "h_min_s", "h_star_s", "binding"])


def cmd_solve(args):
    network, gparams, demand = load_scenario(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(args, gparams, out_dir)
    h_min = maximin.HeadwayField.minimum(network, gparams)
    result = sodta.solve_fixed_headway(network, gparams, demand, h_min,
                                       node_limit=args.node_limit)
    _dump_solve(out_dir, result, network, gparams, {"scenario": "min-hw"})
    _headway_summary(out_dir, network, h_min, h_min)
    print(f"TTT = {result.ttt:.6g} veh*min -> {out_dir}")
    return EXIT_OK


def cmd_maximin(args):
    network, gparams, demand = load_scenario(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(args, gparams, out_dir)
    h_min = maximin.HeadwayField.minimum(network, gparams)
    result = sodta.solve_fixed_headway(network, gparams, demand, h_min,
                                       node_limit=args.node_limit)
    rng = np.random.default_rng(args.seed)
    degenerate = sodta.probe_alternate_optima(result.system, result.solution, rng)
    rep = maximin.maximin_headway(result.state, network, gparams,
                                  lp_cross_check=args.lp_cross_check)
    verify = maximin.verify_optimality_preserved(
        rep.h_star, network, gparams, demand, result.ttt, result.state)
    _dump_solve(out_dir, result, network, gparams, {
        "scenario": "maximin-hw",
        "maximin_mean_ratio": rep.mean_ratio,
        "maximin_mean_gap_s": rep.mean_gap_s,
        "maximin_l1_norm_s": rep.l1_norm,
        "alternate_optima_detected": bool(degenerate),
        "lp_cross_check": rep.lp_agrees,
        "ttt_preserved": verify.ok,
        "ttt_resolved": verify.ttt_resolved,
        "replay_max_residual": verify.replay_max_residual,
    })
    _headway_summary(out_dir, network, rep.h_star, h_min, rep.binding)
    print(f"TTT = {result.ttt:.6g}; mean h*/h_min = {rep.mean_ratio:.3f}; "
          f"preserved = {verify.ok} -> {out_dir}")
    return EXIT_OK if verify.ok else EXIT_SOLVER


def cmd_descend(args):
    network, gparams, demand = load_scenario(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(args, gparams, out_dir)
    if args.h0_s is not None:
        h0 = maximin.HeadwayField.uniform(network, gparams, args.h0_s)
    else:
        phys = network.physical_links
        mid = np.array([[0.5 * (l.params.h_min_s + l.params.h_max_s)] * gparams.n_intervals
                        for l in phys])
        h0 = maximin.HeadwayField(mid, [l.id for l in phys])
    trace = sensitivity.sensitivity_descent(
        network, gparams, demand, h0, eta=args.eta, iters=args.iters,
        backtracking=not args.no_backtracking, node_limit=args.node_limit)
    write_csv(out_dir / "descent.csv", trace.rows,
              ["iteration", "ttt", "grad_inf", "step", "accepted"])
    with open(out_dir / "report.json", "w") as fh:
        json.dump({"scenario": "so-hw", "final_ttt": trace.final_ttt,
                   "status": trace.status, "iterations": len(trace.rows),
                   "backtracking": not args.no_backtracking},
                  fh, indent=1, sort_keys=True, default=float)
    print(f"descent finished at TTT = {trace.final_ttt:.6g} -> {out_dir}")
    return EXIT_OK


def _sweep_level(payload):
    (src_args, param, value) = payload
    args = argparse.Namespace(**src_args)
    if param == "demand":
        args.demand_rate = value
    else:
        args.h_min_s = value
    network, gparams, demand = load_scenario(args)
    h_min = maximin.HeadwayField.minimum(network, gparams)
    try:
        result = sodta.solve_fixed_headway(network, gparams, demand, h_min,
                                           node_limit=args.node_limit)
        rep = maximin.maximin_headway(result.state, network, gparams)
        return {"value": value, "status": "ok", "ttt": result.ttt,
                "mean_gap_seconds": rep.mean_gap_s, "mean_ratio": rep.mean_ratio}
    except (sodta.InfeasibleProblemError, sodta.NetworkInvalidError) as exc:
        return {"value": value, "status": f"infeasible: {exc}", "ttt": float("nan"),
                "mean_gap_seconds": float("nan"), "mean_ratio": float("nan")}
    except (lp.NumericalStallError, lp.NodeLimitExceeded) as exc:
        return {"value": value, "status": f"solver: {exc}", "ttt": float("nan"),
                "mean_gap_seconds": float("nan"), "mean_ratio": float("nan")}


def cmd_sweep(args):
    if args.steps < 1 or args.hi < args.lo:
        raise ConfigError("sweep needs lo <= hi and steps >= 1")
    network, gparams, demand = load_scenario(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(args, gparams, out_dir)
    levels = list(np.linspace(args.lo, args.hi, args.steps))
    src_args = {k: v for k, v in vars(args).items() if k != "func"}
    payloads = [(src_args, args.param, float(v)) for v in levels]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_level, payloads))
    else:
        results = [_sweep_level(p) for p in payloads]
    results.sort(key=lambda r: r["value"])
    if args.param == "demand":
        rows = [{"demand": r["value"], "h_min": args.h_min_s or 0.5,
                 "mean_gap_seconds": r["mean_gap_seconds"], "ttt": r["ttt"],
                 "status": r["status"]} for r in results]
        cols = ["demand", "h_min", "mean_gap_seconds", "ttt", "status"]
    else:
        rows = [{"h_min": r["value"], "demand": args.demand_rate or "",
                 "mean_gap_seconds": r["mean_gap_seconds"], "ttt": r["ttt"],
                 "status": r["status"]} for r in results]
        cols = ["h_min", "demand", "mean_gap_seconds", "ttt", "status"]
    write_csv(out_dir / "sweep.csv", rows, cols)
    with open(out_dir / "report.json", "w") as fh:
        json.dump({"scenario": "sweep", "param": args.param, "rows": rows},
                  fh, indent=1, sort_keys=True, default=float)
    bad = [r for r in rows if r["status"] != "ok"]
    print(f"sweep over {args.param}: {len(rows)} levels, {len(bad)} failed -> {out_dir}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="headwayopt",
                                 description="headway control for system-optimal "
                                             "dynamic traffic assignment")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--network", default="small",
                       help="'small', a network document path, or tntp:NET,TRIPS")
        p.add_argument("--dt-min", type=float, default=None)
        p.add_argument("--horizon-min", type=float, default=None)
        p.add_argument("--demand-horizon-min", type=float, default=None)
        p.add_argument("--veh-length-km", type=float, default=None)
        p.add_argument("--demand-rate", type=float, default=None,
                       help="override every O-D rate, veh/min")
        p.add_argument("--demand-scale", type=float, default=1.0)
        p.add_argument("--h-min-s", type=float, default=None)
        p.add_argument("--h-max-s", type=float, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--solver-tol", type=float, default=lp.FEAS_TOL)
        p.add_argument("--node-limit", type=int, default=20000)

    p = sub.add_parser("solve", help="minimum-headway SO-DTA solve")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("maximin", help="maximin headway pipeline")
    common(p)
    p.add_argument("--lp-cross-check", action="store_true")
    p.set_defaults(func=cmd_maximin)

    p = sub.add_parser("descend", help="sensitivity-based headway search")
    common(p)
    p.add_argument("--h0-s", type=float, default=None,
                   help="uniform starting headway, seconds (default: mid-range)")
    p.add_argument("--eta", type=float, default=2e-4)
    p.add_argument("--iters", type=int, default=8)
    p.add_argument("--no-backtracking", action="store_true")
    p.set_defaults(func=cmd_descend)

    p = sub.add_parser("sweep", help="demand or h_min sweep of the maximin gap")
    common(p)
    p.add_argument("--param", choices=["demand", "h-min"], required=True)
    p.add_argument("--lo", type=float, required=True)
    p.add_argument("--hi", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, netmod.TntpParseError, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (sodta.InfeasibleProblemError, feasibility.HorizonTooShortError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (lp.NumericalStallError, lp.NodeLimitExceeded) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
