"""End-to-end acceptance checks on the 33-bus case.

The session fixture drives the CLI through the full pipeline with the default
configuration: three seeds of both algorithms, 1000 episodes each.  That takes
about 40 minutes on one core.  Setting ACCEPTANCE_RUN_DIR keeps the
outputs there and lets a later session reuse every step whose manifest was
written under the same configuration digest.
"""

import json
import os
import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from _oracles import dykstra_projection, finite_difference, grid_search_projection
from conftest import record
from factories import newton_for, random_radial_doc
from safeflex.cli import main
from safeflex.config import load_config
from safeflex.der import load_fleet
from safeflex.grid import branch_residuals, bundled_network_path, load_network, network_from_dict, solve_power_flow
from safeflex.marl import Agent, TrainingConfig
from safeflex.oracle import solve_opf_hindsight
from safeflex.safety import ProjectionProblem, project, verify_kkt
from test_oracle import brute_force_optimum, two_bus_problem

SEEDS = (0, 1, 2)
ALGOS = ("safe-maddpg", "maddpg-penalty")
SOC_SLACK_KWH = 0.5
DR_TOLERANCE = 0.05


def _manifest_matches(directory, digest):
    path = directory / "manifest.json"
    return path.exists() and json.loads(path.read_text())["config_digest"] == digest


@pytest.fixture(scope="session")
def run_dir(tmp_path_factory):
    keep = os.environ.get("ACCEPTANCE_RUN_DIR")
    out = Path(keep) if keep else tmp_path_factory.mktemp("acceptance")
    out.mkdir(parents=True, exist_ok=True)
    digest = load_config(environ={}, out=str(out)).digest()
    steps = [(out / "profiles", ["gen-profiles"]), (out / "regressor", ["train-regressor"])]
    for algo in ALGOS:
        for s in SEEDS:
            steps.append((out / "train" / algo / f"seed{s}", ["train", "--algo", algo, "--seed", str(s)]))
            steps.append((out / "eval" / algo / f"seed{s}", ["evaluate", "--algo", algo, "--seed", str(s)]))
    steps += [(out / "oracle", ["oracle"]), (out / "report", ["report"])]
    for directory, argv in steps:
        if keep and _manifest_matches(directory, digest):
            continue
        assert main([*argv, "--out", str(out)]) == 0, argv
    return out


def summaries(run_dir, algo):
    return [json.loads((run_dir / "eval" / algo / f"seed{s}" / "summary.json").read_text()) for s in SEEDS]


def test_power_flow_matches_newton_raphson():
    rng = np.random.default_rng(2024)
    worst_v, worst_res = 0.0, 0.0
    nets = [network_from_dict(random_radial_doc(int(rng.integers(2, 7)), rng)) for _ in range(50)]
    nets.append(load_network(bundled_network_path()))
    for net in nets:
        inj = net.nominal_injection()
        sol = solve_power_flow(net, inj, tol=1e-10)
        worst_v = max(worst_v, float(np.max(np.abs(sol.v_pu - newton_for(net, inj)))))
        worst_res = max(worst_res, max(branch_residuals(net, inj, sol).values()))
    ok = worst_v <= 1e-6 and worst_res <= 1e-8
    record(1, "power flow", ok, f"max |V - V_NR| = {worst_v:.1e} pu, max residual = {worst_res:.1e} over {len(nets)} networks")
    assert ok


def test_regressor_fidelity(run_dir):
    cv = json.loads((run_dir / "regressor" / "cv.json").read_text())
    n = json.loads((run_dir / "regressor" / "manifest.json").read_text())["config"]["regressor"]["n_scenarios"]
    ok = cv["mae_mean"] <= 0.003 and cv["r2_mean"] >= 0.99 and n == 5000 and len(cv["mae_pu"]) == 5
    record(2, "regressor", ok, f"MAE {cv['mae_mean']:.2e} pu, R2 {cv['r2_mean']:.4f}, {n} scenarios, {len(cv['mae_pu'])} folds")
    assert ok


def random_instance(rng):
    dim = int(rng.integers(2, 11))
    n_out = int(rng.integers(1, 8))
    A = rng.normal(0.0, 0.02, size=(n_out, dim))
    lo = np.where(rng.random(dim) < 0.5, -1.0, 0.0)
    hi = np.ones(dim)
    b = 0.95 + rng.uniform(-0.02, 0.02, n_out)
    v0 = A @ rng.uniform(lo, hi) + b
    return ProjectionProblem(
        rng.uniform(lo, hi), A, b, v0 - rng.uniform(0, 0.02, n_out), v0 + rng.uniform(0, 0.02, n_out), lo, hi
    )


def test_projection_optimality():
    rng = np.random.default_rng(7)
    kkt, dist, idem, expand = 0.0, 0.0, 0.0, -np.inf
    for _ in range(200):
        p = random_instance(rng)
        res = project(p)
        rep = verify_kkt(p, res)
        kkt = max(kkt, rep.stationarity, rep.primal, rep.dual, rep.complementarity)
        G, h, _ = p.constraints()
        if p.dim == 2:
            ref = grid_search_projection(p.proposed, G, h, p.box_lo, p.box_hi)
        else:
            ref = dykstra_projection(p.proposed, G, h)
        dist = max(dist, float(np.max(np.abs(res.action - ref))))
        again = project(ProjectionProblem(res.action, p.A, p.b, p.v_sq_lo, p.v_sq_hi, p.box_lo, p.box_hi))
        idem = max(idem, float(np.max(np.abs(again.action - res.action))))
        other = rng.uniform(p.box_lo, p.box_hi)
        res2 = project(ProjectionProblem(other, p.A, p.b, p.v_sq_lo, p.v_sq_hi, p.box_lo, p.box_hi))
        expand = max(expand, np.linalg.norm(res.action - res2.action) - np.linalg.norm(p.proposed - other))
    ok = kkt <= 1e-8 and dist <= 2e-3 and idem <= 1e-9 and expand <= 1e-9
    record(3, "projection", ok, f"KKT {kkt:.1e}, oracle distance {dist:.1e}, idempotence {idem:.1e}, expansion {expand:.1e}")
    assert ok


def test_safety_guarantee(run_dir):
    train_v = sum(
        int(pd.read_csv(run_dir / "train" / "safe-maddpg" / f"seed{s}" / "metrics.csv")["violations"].sum()) for s in SEEDS
    )
    episodes = [len(pd.read_csv(run_dir / "train" / "safe-maddpg" / f"seed{s}" / "metrics.csv")) for s in SEEDS]
    eval_v = sum(s["violations"] for s in summaries(run_dir, "safe-maddpg"))
    margin = json.loads((run_dir / "train" / "safe-maddpg" / "seed0" / "manifest.json").read_text())["config"]["margin_pu"]
    ok = train_v == 0 and eval_v == 0 and min(episodes) == 1000 and margin == 0.005
    record(4, "safety", ok, f"{train_v} violations in training ({episodes} episodes), {eval_v} in evaluation, margin {margin} pu")
    assert ok


def test_baseline_ordering(run_dir):
    safe, pen = summaries(run_dir, "safe-maddpg"), summaries(run_dir, "maddpg-penalty")
    r_safe = float(np.mean([s["mean_return"] for s in safe]))
    r_pen = float(np.mean([s["mean_return"] for s in pen]))
    v_safe, v_pen = sum(s["violations"] for s in safe), sum(s["violations"] for s in pen)
    ok = r_safe >= r_pen and v_safe <= v_pen
    record(5, "ordering", ok, f"mean return {r_safe:.1f} vs {r_pen:.1f}, violations {v_safe} vs {v_pen}")
    assert ok


def test_gap_to_oracle(run_dir):
    table = pd.read_csv(run_dir / "report" / "table1.csv").set_index("algorithm")
    gap = float(table.loc["safe-maddpg", "gap_pct"])
    best, _ = brute_force_optimum()
    toy = solve_opf_hindsight(two_bus_problem()).objective
    toy_err = abs(toy - best) / abs(best)
    ok = gap <= 20.0 and toy_err <= 0.01
    record(6, "oracle gap", ok, f"Safe-MADDPG gap {gap:.1f}% (sd {table.loc['safe-maddpg', 'gap_pct_sd']:.1f}), toy oracle vs enumeration {100 * toy_err:.2f}%")
    assert ok


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def test_learning_stack(run_dir, tmp_path):
    rng = np.random.default_rng(11)
    agent = Agent(12, 20, 10, TrainingConfig(hidden=(16, 16)), rng)
    worst = 0.0
    for net, n_in, n_out in [(agent.actor, 12, 2), (agent.critics[0], 30, 1)]:
        x = rng.normal(size=(4, n_in))
        up = rng.normal(size=(4, n_out))

        def loss():
            return float(np.sum(up * net.forward(x)))

        net.forward(x)
        grads, _ = net.backward(x, up)
        for p, g in zip(net.parameters(), grads):
            worst = max(worst, rel_err(g, finite_difference(loss, p)))
    cfg = tmp_path / "short.json"
    cfg.write_text(json.dumps({"profiles_dir": str(run_dir / "profiles"), "training": {"episodes": 50}}))
    digests = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        shutil.copytree(run_dir / "regressor", out / "regressor")
        assert main(["train", "--algo", "safe-maddpg", "--config", str(cfg), "--out", str(out)]) == 0
        digests.append((out / "train" / "safe-maddpg" / "seed0" / "metrics.csv").read_bytes())
    same = digests[0] == digests[1]
    ok = worst <= 1e-4 and same
    record(7, "learning stack", ok, f"max gradient relative error {worst:.1e}, repeated training identical: {same}")
    assert ok


def test_intertemporal_constraints(run_dir):
    half = np.array([0.5 * a.ess.e_max_kwh for a in load_fleet(bundled_network_path("fleet")).agents])
    lines, ok = [], True
    for algo in ALGOS:
        sums = summaries(run_dir, algo)
        # worst end-of-day energy relative to the half-capacity target
        soc = min(float(np.min(np.array(s["end_soc_kwh"]) - half)) for s in sums)
        dr_ratio = max(np.max(np.array(s["cumulative_dr_kwh"]) / np.array(s["dr_budget_kwh"])) for s in sums)
        lines.append(f"{algo} end SOC {soc:+.2f} kWh from target, max DR {100 * dr_ratio:.1f}% of budget")
        if algo == "safe-maddpg":
            ok = soc >= -SOC_SLACK_KWH and dr_ratio <= 1 + DR_TOLERANCE
    record(8, "intertemporal", ok, "; ".join(lines))
    assert ok
