"""Command-line driver. Every command writes under the run directory and echoes its config."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baum_welch import calibrate, sequences_from_traces
from .belief import earn_probabilities, filter_sequence, sequence_likelihoods, trap_flags, write_race_beliefs_csv
from .config import RunConfig, load_config
from .emission import build_emission_params, build_tables, read_table, write_table
from .env import DuelEnv
from .evaluation import (
    evaluate_inference,
    evaluate_policies,
    robustness_sweep,
    threshold_sweep,
    write_json,
    write_policy_table,
    write_table3,
    write_table4,
    write_table5,
)
from .policy import DQNAgent, baseline_policy, load_checkpoint, save_checkpoint, train_policy
from .sim import generate_dataset, read_race, write_race
from .transition import TransitionModel

log = logging.getLogger("rivalhmm")


class CommandError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- artifact helpers --------------------------------------------------------

def _run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.dumps())
    return d


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError("missing_input", f"{what} not found: {path}")
    return path


def _params(cfg: RunConfig):
    return build_emission_params(cfg.circuit, w_active=cfg.sim.w_active)


def _default_model(cfg: RunConfig) -> TransitionModel:
    return TransitionModel.default(cfg.p_burn, cfg.p_e_prior)


def _save_model(path: Path, model: TransitionModel) -> None:
    write_json(path, {"format": "rivalhmm-transition", "version": 1, "ers": model.ers.tolist(),
                      "tyre_persistence": list(model.tyre_persistence), "p_burn": model.p_burn,
                      "p_d": model.p_d, "p_e_prior": model.p_e_prior})


def _load_model(path: Path) -> TransitionModel:
    d = json.loads(path.read_text())
    return TransitionModel(ers=np.asarray(d["ers"], dtype=float), tyre_persistence=tuple(d["tyre_persistence"]),
                           p_burn=d["p_burn"], p_d=d["p_d"], p_e_prior=d["p_e_prior"])


def _load_inference(cfg: RunConfig, tables_dir: str | None):
    """Tables and transition model: from ``tables_dir`` if given, else built analytically."""
    if tables_dir is None:
        return build_tables(_params(cfg)), _default_model(cfg)
    d = Path(tables_dir)
    tables = (read_table(_require(d / "normal.tbl", "emission table")),
              read_table(_require(d / "zone.tbl", "emission table")))
    model_path = d / "transition.json"
    return tables, (_load_model(model_path) if model_path.exists() else _default_model(cfg))


def _race_paths(run: Path) -> list[Path]:
    paths = sorted((run / "races").glob("race_*.csv"))
    if not paths:
        raise CommandError("missing_input", f"no race files under {run / 'races'}; run 'simulate' first")
    return paths


def _load_races(run: Path):
    return [read_race(p) for p in _race_paths(run)]


# -- commands ----------------------------------------------------------------

def cmd_build_tables(cfg: RunConfig, args) -> dict:
    run = _run_dir(cfg)
    out = run / "tables"
    out.mkdir(exist_ok=True)
    tables = build_tables(_params(cfg))
    sums = {}
    worst = 0.0
    for t in tables:
        sums[t.variant] = write_table(out / f"{t.variant}.tbl", t)
        worst = max(worst, max(float(np.max(np.abs(m.sum(axis=1) - 1.0))) for m in t.masses))
    _save_model(out / "transition.json", _default_model(cfg))
    write_json(out / "checksums.json", sums)
    print(f"row-sum audit: max |sum - 1| = {worst:.3e} ({'ok' if worst <= 1e-9 else 'FAIL'})")
    return {"checksums": sums, "max_row_sum_error": worst}


def cmd_simulate(cfg: RunConfig, args) -> dict:
    run = _run_dir(cfg)
    out = run / "races"
    out.mkdir(exist_ok=True)
    races = generate_dataset(cfg.circuit, cfg.n_races, cfg.base_seed, cfg.sim)
    for i, race in enumerate(races):
        write_race(race, out / f"race_{i:03d}.csv")
    n = sum(r.n_records for r in races)
    traps = int(sum(c.trap_active.sum() for r in races for c in r.cars))
    print(f"simulated {len(races)} races, {n} rival records, {traps} trap sectors")
    return {"races": len(races), "records": n, "trap_sectors": traps}


def cmd_infer(cfg: RunConfig, args) -> dict:
    run = _run_dir(cfg)
    tables, model = _load_inference(cfg, args.tables)
    out = run / "beliefs"
    out.mkdir(exist_ok=True)
    total = 0.0
    for path in _race_paths(run):
        race = read_race(path)
        sil = race.sector_in_lap()
        rows = []
        for car in race.cars:
            lik = sequence_likelihoods(car.bins, car.in_zone, tables)
            p_e = earn_probabilities(car.gap_ahead, sil, race.circuit.detection_sector,
                                     race.sim_config.earn_gap) if cfg.use_gaps else None
            res = filter_sequence(lik, model, p_e)
            total += res.loglik
            rows.append((car.car, res.beliefs, trap_flags(res.beliefs, car.z_aero, car.in_zone, cfg.theta_trap)))
        write_race_beliefs_csv(out / path.name, rows)
    write_json(out / "summary.json", {"log_likelihood": total, "tables": args.tables or "analytic"})
    print(f"dataset log-likelihood {total:.6f}")
    return {"log_likelihood": total}


def cmd_calibrate(cfg: RunConfig, args) -> dict:
    run = _run_dir(cfg)
    tables, model = _load_inference(cfg, args.tables)
    seqs = sequences_from_traces(_load_races(run), cfg.use_gaps)
    c = cfg.calibration
    res = calibrate(seqs, tables, model, max_iters=c.max_iters, tol=c.tol, pseudo_count=c.pseudo_count,
                    update_transitions=c.update_transitions)
    out = run / "calibrated"
    out.mkdir(exist_ok=True)
    sums = {t.variant: write_table(out / f"{t.variant}.tbl", t) for t in res.tables}
    write_json(out / "checksums.json", sums)
    _save_model(out / "transition.json", res.model)
    write_json(out / "report.json", res.report.to_dict())
    lls = res.report.log_likelihoods
    print(f"calibration: {res.report.iterations} iterations, log-likelihood {lls[0]:.4f} -> {lls[-1]:.4f}")
    return res.report.to_dict()


def cmd_train(cfg: RunConfig, args) -> dict:
    run = _run_dir(cfg)
    tables, model = _load_inference(cfg, args.tables)
    env = DuelEnv(cfg.circuit, cfg.duel, cfg.sim, _params(cfg), tables, model, cfg.theta_trap)
    out = run / "policy"
    out.mkdir(exist_ok=True)
    agent = DQNAgent(cfg.train)
    returns = []
    for cycle in range(args.cycles):
        if cycle > 0:
            # Alternation: refit the HMM on fresh synthetic races, then retrain on a clean buffer.
            seeds_from = cfg.base_seed + 10_000 * cycle
            races = generate_dataset(cfg.circuit, cfg.n_races, seeds_from, cfg.sim)
            c = cfg.calibration
            res = calibrate(sequences_from_traces(races, cfg.use_gaps), env.tables, env.model,
                            max_iters=c.max_iters, tol=c.tol, pseudo_count=c.pseudo_count,
                            update_transitions=c.update_transitions)
            env.tables, env.model = res.tables, res.model
            agent.buffer.clear()
        tc = replace(cfg.train, train_seed_base=cfg.train.train_seed_base + cycle * cfg.train.n_races)
        _, hist = train_policy(env, tc, agent, cfg.gaps)
        returns.extend(hist.race_returns)
    save_checkpoint(out / "qnet.bin", agent.online, cfg.to_dict())
    with open(out / "history.csv", "w") as fh:
        fh.write("race,return\n")
        fh.writelines(f"{i},{r!r}\n" for i, r in enumerate(returns))
    print(f"trained on {len(returns)} races; checkpoint {out / 'qnet.bin'}")
    return {"races": len(returns), "grad_steps": agent.grad_steps}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    run = _run_dir(cfg)
    tables, model = _load_inference(cfg, args.tables)
    out = run / "reports"
    out.mkdir(exist_ok=True)
    metrics = evaluate_inference(_load_races(run), tables, model, cfg.theta_trap, cfg.use_gaps)
    write_table3(out / "table3.csv", metrics)
    summary = {"inference": metrics.to_dict()}

    ckpt = Path(args.checkpoint) if args.checkpoint else run / "policy" / "qnet.bin"
    net = load_checkpoint(ckpt)[0] if ckpt.exists() else None
    if args.checkpoint and net is None:
        raise CommandError("missing_input", f"checkpoint not found: {ckpt}")
    kinds = ["B1", "B2"] + (["B3", "B4"] if net is not None else [])
    env = DuelEnv(cfg.circuit, cfg.duel, cfg.sim, _params(cfg), tables, model, cfg.theta_trap)
    policies = {k: baseline_policy(k, net, cfg.gaps) for k in kinds}
    seeds = range(cfg.eval_seed_base, cfg.eval_seed_base + cfg.eval_races)
    results = evaluate_policies(env, policies, seeds)
    write_policy_table(out / "policies.csv", results)
    summary["policies"] = {k: r.to_dict() for k, r in results.items()}
    write_json(out / "summary.json", summary)
    for label, key in (("ERS accuracy", "ers"), ("top-1", "top1"), ("trap recall", "trap_recall")):
        print(f"{label}: {getattr(metrics, key):.4f}")
    for k, r in results.items():
        print(f"{k}: return {r.mean_return:.3f}, trap-sector burn rate {r.trap_sector_burn_rate:.3f}")
    return summary


def cmd_sweep(cfg: RunConfig, args) -> dict:
    run = _run_dir(cfg)
    tables, model = _load_inference(cfg, args.tables)
    races = _load_races(run)
    out = run / "sweeps"
    out.mkdir(exist_ok=True)
    if args.kind == "robustness":
        res = robustness_sweep(races, _params(cfg), model, cfg.sweep_side, theta=cfg.theta_trap,
                               base_seed=cfg.base_seed)
        write_table4(out / f"robustness_{cfg.sweep_side}.csv", res)
        for r in res:
            print(f"{r.label:>12}: ERS accuracy {r.metrics.ers:.4f}")
        return {"robustness": [r.to_dict() for r in res]}
    pts = threshold_sweep(races, tables, model, _params(cfg), theta=cfg.theta_trap)
    write_table5(out / "threshold.csv", pts)
    for p in pts:
        print(f"{p.threshold:.1f} km/h: recall {p.recall:.4f}, FPR {p.fpr:.4f}")
    return {"threshold": [p.__dict__ for p in pts]}


COMMANDS = {
    "build-tables": cmd_build_tables,
    "simulate": cmd_simulate,
    "infer": cmd_infer,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rivalhmm", description="Rival energy-state inference and energy policy tools.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="run directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="dataset base seed (overrides base_seed)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.n_races=50")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("infer", "calibrate", "train", "evaluate", "sweep"):
            sp.add_argument("--tables", help="directory with normal.tbl, zone.tbl and transition.json")
        if name == "train":
            sp.add_argument("--cycles", type=int, default=1,
                            help="HMM/DQN alternation cycles (1 = pre-training only)")
        if name == "evaluate":
            sp.add_argument("--checkpoint", help="network checkpoint (default: <run>/policy/qnet.bin)")
        if name == "sweep":
            sp.add_argument("kind", choices=("robustness", "threshold"))
    return p


def _error_line(code: str, message: str) -> str:
    return json.dumps({"error": code, "message": message}, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.out is not None:
            overrides.append(f"out_dir={json.dumps(args.out)}")
        if args.seed is not None:
            overrides.append(f"base_seed={args.seed}")
        try:
            cfg = load_config(args.config, overrides)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise CommandError("usage", str(exc)) from None
        if getattr(args, "cycles", 1) < 1:
            raise CommandError("usage", "--cycles must be at least 1")
        COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        print(_error_line(exc.code, str(exc)), file=sys.stderr)
        return 2 if exc.code == "usage" else 1
    except (OSError, ValueError) as exc:
        print(_error_line("failed", str(exc)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
