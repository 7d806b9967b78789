"""Command line entry point: ``safeflex <command> [--config ...] [--seed ...] [--out ...]``.

Every command writes into a directory below ``--out`` together with a
``manifest.json`` recording the full configuration, its digest, the seed, the
code revision and sha256 hashes of the inputs read and the files written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, plotting
from .config import ExperimentConfig, load_config
from .der import FleetSpec, load_fleet
from .env import EnvConfig, FlexibilityEnv, ProfileError, load_profiles
from .grid import NetworkModel, VoltageLimits, load_network
from .marl import (
    EvaluationReport,
    evaluate,
    env_config_for,
    load_checkpoint,
    rollout,
    save_checkpoint,
    train,
    write_metrics,
    write_traces,
)
from .oracle import DispatchProblem, compare_to_policy, solve_opf_hindsight, write_solution_csv
from .profiles import generate_profiles, write_profiles
from .regressor import LinearVoltageModel, cross_validate, fit, generate_dataset
from .safety import RELAXED, SafetyLayer

log = logging.getLogger("safeflex")

ALGORITHMS = ("safe-maddpg", "maddpg-penalty")
FIG2_AGENT = 0


class PrerequisiteError(RuntimeError):
    """An input produced by an earlier command is missing."""


# -- manifests ---------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def revision() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _hash_tree(paths: list[Path], root: Path) -> dict[str, str]:
    files: list[Path] = []
    for p in paths:
        files.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
    out = {}
    for f in files:
        try:
            key = str(f.relative_to(root))
        except ValueError:
            key = str(f)
        out[key] = sha256_file(f)
    return out


def write_manifest(out_dir: Path, command: list[str], cfg: ExperimentConfig, inputs: list[Path]) -> Path:
    outputs = [p for p in sorted(out_dir.iterdir()) if p.name != "manifest.json"]
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "revision": revision(),
        "inputs": _hash_tree(inputs, Path(cfg.out)),
        "outputs": _hash_tree(outputs, out_dir),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=float) + "\n")


# -- shared setup ------------------------------------------------------------


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"{path} not found; {hint}")
    return path


def _network(cfg: ExperimentConfig) -> NetworkModel:
    net = load_network(_require(Path(cfg.network), "check the 'network' path in the configuration"))
    return replace(net, limits=VoltageLimits(cfg.v_min_pu, cfg.v_max_pu))


def _fleet(cfg: ExperimentConfig) -> FleetSpec:
    return load_fleet(_require(Path(cfg.fleet), "check the 'fleet' path in the configuration"))


def _profile_files(cfg: ExperimentConfig) -> tuple[Path, Path]:
    hint = "run `safeflex gen-profiles` first or set 'profiles_dir'"
    return (
        _require(cfg.profile_path / "prices.csv", hint),
        _require(cfg.profile_path / "loads.csv", hint),
    )


def _setup(cfg: ExperimentConfig):
    net, fleet = _network(cfg), _fleet(cfg)
    prices_csv, loads_csv = _profile_files(cfg)
    prices, exo = load_profiles(prices_csv, loads_csv, net, fleet)
    return net, fleet, prices, exo


def _regressor_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "regressor"


def _load_regressor(cfg: ExperimentConfig) -> LinearVoltageModel:
    path = _require(_regressor_dir(cfg) / "model.json", "run `safeflex train-regressor` first")
    return LinearVoltageModel.load(path)


def _train_dir(cfg: ExperimentConfig, algo: str, seed: int) -> Path:
    return Path(cfg.out) / "train" / algo / f"seed{seed}"


def _eval_dir(cfg: ExperimentConfig, algo: str, seed: int) -> Path:
    return Path(cfg.out) / "eval" / algo / f"seed{seed}"


def _oracle_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "oracle"


def _training_config(cfg: ExperimentConfig, algo: str):
    return replace(cfg.training, safety=(algo == "safe-maddpg"))


def _eval_env_config(cfg: ExperimentConfig) -> EnvConfig:
    # both algorithms are scored with the same voltage penalty
    return replace(cfg.env, kappa_v=cfg.training.kappa_v, kappa_dr=cfg.training.kappa_dr, kappa_ess=cfg.training.kappa_ess)


def _safety_layer(cfg: ExperimentConfig, net: NetworkModel, fleet: FleetSpec) -> SafetyLayer:
    return SafetyLayer(_load_regressor(cfg), fleet, net.limits, margin_pu=cfg.margin_pu, dt_h=cfg.env.dt_h)


# -- commands ----------------------------------------------------------------


def cmd_gen_profiles(cfg: ExperimentConfig, command: list[str]) -> Path:
    net, fleet = _network(cfg), _fleet(cfg)
    data = generate_profiles(net, fleet, cfg.profiles, seed=cfg.seed)
    out = cfg.profile_path
    out.mkdir(parents=True, exist_ok=True)
    write_profiles(data, out)
    _write_json(out / "calibration.json", {"load_scale": data.load_scale, "rows": data.n_steps})
    write_manifest(out, command, cfg, [Path(cfg.network), Path(cfg.fleet)])
    log.info("wrote %d hourly rows to %s", data.n_steps, out)
    return out


def cmd_train_regressor(cfg: ExperimentConfig, command: list[str]) -> Path:
    net, fleet, _prices, exo = _setup(cfg)
    env = FlexibilityEnv(net, fleet, _prices, exo, cfg.env)
    train_rows = slice(0, int(env.train_days[-1] + 1) * cfg.env.horizon)
    rc = cfg.regressor
    ds = generate_dataset(
        net, fleet, exo.active_kw[train_rows], exo.reactive_kvar[train_rows], rc.n_scenarios, cfg.seed, rc.perturbation
    )
    cv = cross_validate(ds, k=rc.folds, seed=cfg.seed, ridge_lambda=rc.ridge_lambda)
    model = fit(ds, rc.ridge_lambda)
    out = _regressor_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    _write_json(out / "cv.json", cv.to_dict())
    write_manifest(out, command, cfg, [Path(cfg.network), Path(cfg.fleet), cfg.profile_path])
    log.info("regressor: MAE %.2e pu, R2 %.5f over %d folds", cv.mae_mean, cv.r2_mean, rc.folds)
    return out


def cmd_train(cfg: ExperimentConfig, command: list[str], algo: str) -> Path:
    net, fleet, prices, exo = _setup(cfg)
    tcfg = _training_config(cfg, algo)
    layer = _safety_layer(cfg, net, fleet) if tcfg.safety else None
    env = FlexibilityEnv(net, fleet, prices, exo, env_config_for(cfg.env, tcfg))
    result = train(env, tcfg, cfg.seed, safety=layer, progress_every=50)
    out = _train_dir(cfg, algo, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.learner, out / "checkpoint")
    write_metrics(result.metrics, out / "metrics.csv")
    inputs = [Path(cfg.network), Path(cfg.fleet), cfg.profile_path]
    if layer is not None:
        inputs.append(_regressor_dir(cfg) / "model.json")
    write_manifest(out, command, cfg, inputs)
    return out


def _summary(report: EvaluationReport, env: FlexibilityEnv) -> dict:
    doc = report.summary()
    doc["returns"] = list(report.returns)
    doc["net_benefit"] = list(report.net_benefit)
    doc["end_soc_kwh"] = report.end_soc_kwh.tolist()
    doc["cumulative_dr_kwh"] = report.cumulative_dr_kwh.tolist()
    doc["dr_budget_kwh"] = env.budget_kwh.tolist()
    doc["relaxed"] = sum(1 for r in report.traces if r["status"] == RELAXED and r["agent"] == 0)
    return doc


def cmd_evaluate(cfg: ExperimentConfig, command: list[str], algo: str) -> Path:
    ckpt = _require(
        _train_dir(cfg, algo, cfg.seed) / "checkpoint" / "checkpoint.json",
        f"run `safeflex train --algo {algo} --seed {cfg.seed}` first",
    )
    net, fleet, prices, exo = _setup(cfg)
    layer = _safety_layer(cfg, net, fleet) if algo == "safe-maddpg" else None
    env = FlexibilityEnv(net, fleet, prices, exo, _eval_env_config(cfg))
    learner = load_checkpoint(ckpt.parent, env)
    report = evaluate(learner, env, safety=layer)
    out = _eval_dir(cfg, algo, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_traces(report, out / "traces.csv")
    _write_json(out / "summary.json", _summary(report, env))
    inputs = [Path(cfg.network), Path(cfg.fleet), cfg.profile_path, ckpt.parent]
    if layer is not None:
        inputs.append(_regressor_dir(cfg) / "model.json")
    write_manifest(out, command, cfg, inputs)
    log.info("%s seed %d: net benefit %.2f, violations %d", algo, cfg.seed, report.total_net_benefit, report.violations)
    return out


def cmd_oracle(cfg: ExperimentConfig, command: list[str]) -> Path:
    net, fleet, prices, exo = _setup(cfg)
    env = FlexibilityEnv(net, fleet, prices, exo, _eval_env_config(cfg))
    h = cfg.env.horizon
    e0 = np.array([cfg.env.initial_soc_frac * a.ess.e_max_kwh for a in fleet.agents])
    solutions, days = [], []
    for day in env.test_days:
        rows = slice(int(day) * h, int(day) * h + h)
        problem = DispatchProblem(
            net, fleet, prices.lambda_flex[rows], prices.lambda_buy[rows],
            exo.active_kw[rows], exo.reactive_kvar[rows], e0, dt_h=cfg.env.dt_h,
        )  # fmt: skip
        sol = solve_opf_hindsight(problem)
        solutions.append((int(day), sol))
        days.append(
            {
                "day": int(day),
                "objective": sol.objective,
                "status": sol.status,
                "duality_gap": sol.duality_gap,
                "kkt": sol.kkt,
                "exact_violations": sol.exact_violations,
                "exact_max_excess_pu": sol.exact_max_excess_pu,
                "linearisation_error_pu": sol.linearisation_error_pu,
                "simultaneous_steps": sol.simultaneous_steps,
            }
        )
    # do-nothing benchmark, so reports can show how much of the achievable margin a policy captured
    zero = rollout(env, lambda e, o: np.zeros((e.n_agents, 2)), env.test_days)
    out = _oracle_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_solution_csv(solutions, fleet, out / "solution.csv")
    doc = {
        "j_opf": float(sum(s.objective for _, s in solutions)),
        "j_zero": zero.total_net_benefit,
        "zero_violations": zero.violations,
        "days": days,
    }
    _write_json(out / "summary.json", doc)
    write_manifest(out, command, cfg, [Path(cfg.network), Path(cfg.fleet), cfg.profile_path])
    log.info("oracle: J %.2f over %d days", doc["j_opf"], len(days))
    return out


def _fig2_data(cfg: ExperimentConfig) -> pd.DataFrame:
    """Surrogate against power-flow voltage at the first agent's bus on the first test day."""
    net, fleet, prices, exo = _setup(cfg)
    model = _load_regressor(cfg)
    env = FlexibilityEnv(net, fleet, prices, exo, cfg.env)
    env.reset(int(env.test_days[0]))
    bus = fleet.buses[FIG2_AGENT]
    rows = []
    idle = np.zeros((len(fleet), 2))
    for _ in range(cfg.env.horizon):
        t = env.t
        predicted = np.sqrt(model.predict(env.base_injection(), idle, fleet))
        out = env.step(idle)
        rows.append(
            {"t": t, "bus": int(bus), "actual_pu": float(np.sqrt(out.solution.v_sq_pu[bus])), "predicted_pu": float(predicted[bus])}
        )
    return pd.DataFrame(rows)


def cmd_report(cfg: ExperimentConfig, command: list[str]) -> Path:
    oracle_summary = _require(_oracle_dir(cfg) / "summary.json", "run `safeflex oracle` first")
    oracle = json.loads(oracle_summary.read_text())
    found = {
        algo: [s for s in cfg.seeds if (_eval_dir(cfg, algo, s) / "summary.json").exists()] for algo in ALGORITHMS
    }
    if not any(found.values()):
        raise PrerequisiteError(
            f"no evaluation results under {Path(cfg.out) / 'eval'}; run `safeflex evaluate --algo <algo> --seed <s>` first"
        )
    out = Path(cfg.out) / "report"
    out.mkdir(parents=True, exist_ok=True)
    inputs: list[Path] = [_oracle_dir(cfg)]

    rows = []
    for algo, seeds in found.items():
        if not seeds:
            continue
        sums = [json.loads((_eval_dir(cfg, algo, s) / "summary.json").read_text()) for s in seeds]
        inputs.extend(_eval_dir(cfg, algo, s) for s in seeds)
        j_pol = [s["total_net_benefit"] for s in sums]
        gaps = [compare_to_policy(oracle["j_opf"], j, oracle["j_zero"]) for j in j_pol]
        rows.append(
            {
                "algorithm": algo,
                "gap_pct": float(np.mean([g.gap_pct for g in gaps])),
                "violations": int(sum(s["violations"] for s in sums)),
                "gap_pct_sd": float(np.std([g.gap_pct for g in gaps])),
                "net_benefit": float(np.mean(j_pol)),
                "mean_return": float(np.mean([s["mean_return"] for s in sums])),
                "margin_captured": float(np.mean([g.margin_captured for g in gaps])),
                "projections": int(sum(s["projections"] for s in sums)),
                "relaxed": int(sum(s["relaxed"] for s in sums)),
                "n_seeds": len(seeds),
            }
        )
    rows.append(
        {
            "algorithm": "oracle",
            "gap_pct": 0.0,
            "violations": int(sum(d["exact_violations"] for d in oracle["days"])),
            "gap_pct_sd": 0.0,
            "net_benefit": oracle["j_opf"],
            "mean_return": float("nan"),
            "margin_captured": 1.0,
            "projections": 0,
            "relaxed": 0,
            "n_seeds": 0,
        }
    )
    table = pd.DataFrame(rows)
    table.to_csv(out / "table1.csv", index=False, float_format="%.6f", lineterminator="\n")

    if (_regressor_dir(cfg) / "model.json").exists():
        fig2 = _fig2_data(cfg)
        fig2.to_csv(out / "fig2_voltage_tracking.csv", index=False, float_format="%.6f", lineterminator="\n")
        plotting.voltage_tracking(fig2, f"bus {int(fig2['bus'].iloc[0])}", out / "fig2_voltage_tracking.png")
        inputs.append(_regressor_dir(cfg) / "model.json")
    else:
        log.warning("no regressor model; skipping the voltage tracking figure")

    metrics = {}
    for algo in ALGORITHMS:
        runs = []
        for s in cfg.seeds:
            p = _train_dir(cfg, algo, s) / "metrics.csv"
            if p.exists():
                runs.append(pd.read_csv(p).assign(algorithm=algo, seed=s))
                inputs.append(p)
        metrics[algo] = runs
    if any(metrics.values()):
        pd.concat([r for runs in metrics.values() for r in runs]).to_csv(
            out / "fig3_training.csv", index=False, float_format="%.6f", lineterminator="\n"
        )
        plotting.training_curves(metrics, out / "fig3_training.png")

    traces = {}
    for algo, seeds in found.items():
        if seeds:
            traces[algo] = pd.read_csv(_eval_dir(cfg, algo, seeds[0]) / "traces.csv")
    oracle_trace = pd.read_csv(_oracle_dir(cfg) / "solution.csv")
    day = int(oracle_trace["day"].min())
    fig4 = pd.concat(
        [df.assign(source=name)[["source", "day", "t", "agent", "p_dr_kw", "p_ch_kw", "p_dis_kw", "soc_kwh"]]
         for name, df in {**traces, "oracle": oracle_trace}.items()]
    )  # fmt: skip
    fig4.to_csv(out / "fig4_dispatch.csv", index=False, float_format="%.6f", lineterminator="\n")
    plotting.dispatch_profiles({**traces, "oracle": oracle_trace}, day, out / "fig4_dispatch.png")
    fig5 = pd.concat([df.assign(source=name)[["source", "day", "t", "agent", "v_bus_pu", "v_min_pu"]] for name, df in traces.items()])
    fig5.to_csv(out / "fig5_voltage.csv", index=False, float_format="%.6f", lineterminator="\n")
    plotting.voltage_profiles(traces, cfg.v_min_pu, cfg.v_max_pu, out / "fig5_voltage.png")

    write_manifest(out, command, cfg, inputs)
    print(table.to_string(index=False))
    return out


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="TOML or JSON experiment configuration")
    common.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    common.add_argument("--out", help="output root directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="safeflex", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-profiles", parents=[common], help="generate synthetic price and load profiles")
    sub.add_parser("train-regressor", parents=[common], help="fit and cross-validate the linear voltage model")
    for name, text in (("train", "train agents"), ("evaluate", "evaluate a trained checkpoint on the test week")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--algo", choices=ALGORITHMS, default="safe-maddpg")
    sub.add_parser("oracle", parents=[common], help="solve the hindsight dispatch for the test week")
    sub.add_parser("report", parents=[common], help="summary table and figures")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    seed, out, config = (getattr(args, k, None) for k in ("seed", "out", "config"))
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")
    if seed is not None and not 0 <= seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        cfg = load_config(config, seed=seed, out=out)
        command = ["safeflex", *argv]
        if args.command == "gen-profiles":
            cmd_gen_profiles(cfg, command)
        elif args.command == "train-regressor":
            cmd_train_regressor(cfg, command)
        elif args.command == "train":
            cmd_train(cfg, command, args.algo)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, command, args.algo)
        elif args.command == "oracle":
            cmd_oracle(cfg, command)
        else:
            cmd_report(cfg, command)
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError, ProfileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
