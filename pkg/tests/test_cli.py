import json
from pathlib import Path

import numpy as np
import pytest

from headwayopt import cli, network as netmod
from headwayopt.network import DemandProfile, GlobalParams, save_document

from conftest import make_chain_network


@pytest.fixture()
def tiny_doc(tmp_path):
    network = make_chain_network([2.4, 3.0], v_f=1.2, cap=30.0)
    gparams = GlobalParams(veh_len_km=0.004, dt_min=3.0, n_intervals=14,
                           demand_horizon_min=9.0)
    (r,) = sorted(network.dummy_origins)
    (s,) = network.dummy_destinations
    demand = DemandProfile.constant({(r, s): 20.0}, gparams.n_demand)
    path = tmp_path / "tiny.json"
    save_document(path, network, gparams, demand)
    return path


def test_solve_writes_run_directory(tiny_doc, tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["solve", "--network", str(tiny_doc), "--out", str(out)])
    assert rc == cli.EXIT_OK
    assert (out / "config.json").exists()
    assert (out / "report.json").exists()
    assert (out / "trajectory.csv").exists()
    assert (out / "headway_summary.csv").exists()
    report = json.loads((out / "report.json").read_text())
    assert report["scenario"] == "min-hw"
    assert report["ttt"] > 0
    assert report["max_residual"] < 1e-6
    header = (out / "trajectory.csv").read_text().splitlines()[0]
    assert header.split(",") == cli.TRAJECTORY_COLUMNS


def test_maximin_run(tiny_doc, tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["maximin", "--network", str(tiny_doc), "--out", str(out)])
    assert rc == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["ttt_preserved"] is True
    assert report["maximin_mean_ratio"] >= 1.0
    assert (out / "headway_cells.csv").exists()


def test_config_error_exit_code(tmp_path):
    rc = cli.main(["solve", "--network", "/nonexistent.json",
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_CONFIG


def test_infeasible_exit_code(tiny_doc, tmp_path):
    rc = cli.main(["solve", "--network", str(tiny_doc),
                   "--horizon-min", "12", "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_INFEASIBLE


def test_sweep_deterministic_bytes(tiny_doc, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["sweep", "--network", str(tiny_doc), "--param", "demand",
                       "--lo", "14", "--hi", "20", "--steps", "2",
                       "--seed", "7", "--out", str(out)])
        assert rc == cli.EXIT_OK
        outs.append((out / "sweep.csv").read_bytes())
    assert outs[0] == outs[1]


def test_descend_trace(tiny_doc, tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["descend", "--network", str(tiny_doc), "--h0-s", "1.2",
                   "--eta", "1e-4", "--iters", "2", "--out", str(out)])
    assert rc == cli.EXIT_OK
    lines = (out / "descent.csv").read_text().splitlines()
    assert lines[0] == "iteration,ttt,grad_inf,step,accepted"
    assert len(lines) >= 2


def test_tntp_source_requires_discretization(tmp_path):
    rc = cli.main(["solve", "--network", "tntp:a,b", "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_CONFIG
