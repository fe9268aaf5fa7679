"""Command-line entry point: train, eval, compare, export-pgm."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config, resolved_config_text
from .dqn import build_q_network, make_env_factory, train_dqn
from .evaluate import (EvalReport, GreedyLogitsPolicy, GreedyQPolicy, confusion,
                       confusion_csv, evaluate, export_traces, load_report)
from .fileio import atomic_write_text
from .nn import load_weights, save_weights
from .ppo import ActorCritic, train_ppo
from .render import features, push_frame, render, write_pgm
from .rewards import rule_oracle
from .sim import IntersectionEnv
from .svgplot import line_plot

WEIGHTS_NAME = "weights.nnw"
TRAIN_LOG_NAME = "train_log.csv"
REPORT_NAME = "eval_report.json"
CONFUSION_NAME = "confusion.csv"
RESOLVED_NAME = "resolved_config"
TRACES_DIR = "traces"


def _load_policy_nets(rc: RunConfig, weights_path: Path):
    """Rebuild the configured architecture and load weights into it."""
    if rc.algorithm == "dqn":
        net = build_q_network(rc.dqn.arch, seed=0)
        load_weights(weights_path, [net])
        return GreedyQPolicy(net)
    ac = ActorCritic(rc.ppo.arch, seed=0)
    load_weights(weights_path, ac.nets)
    return GreedyLogitsPolicy(ac)


def cmd_train(args: argparse.Namespace) -> int:
    rc = load_run_config(args.config, seed_override=args.seed, out_override=args.out)
    reward_model = rc.reward.build_model()
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env_factory = make_env_factory(rc.env)
    steps = rc.effective_steps()
    if rc.algorithm == "dqn":
        cfg = replace(rc.dqn, n_steps=steps)
        net, log = train_dqn(env_factory, reward_model, cfg, rc.seed,
                             reward_cfg=rc.reward.cfg)
        save_weights(out / WEIGHTS_NAME, [net])
    else:
        cfg = replace(rc.ppo, n_steps=steps)
        ac, log = train_ppo(env_factory, reward_model, cfg, rc.seed,
                            reward_cfg=rc.reward.cfg)
        save_weights(out / WEIGHTS_NAME, ac.nets)
    log.write_csv(out / TRAIN_LOG_NAME)
    atomic_write_text(out / RESOLVED_NAME, resolved_config_text(rc))
    print(f"trained {rc.algorithm} for {steps} steps; "
          f"{len(log.rows)} episodes -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    rc = load_run_config(args.config, seed_override=args.seed, out_override=args.out)
    weights = Path(args.weights) if args.weights else Path(rc.out_dir) / WEIGHTS_NAME
    if not weights.exists():
        raise ConfigError(f"weights file not found: {weights}")
    policy = _load_policy_nets(rc, weights)
    reward_model = rc.reward.build_model()
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(policy, make_env_factory(rc.env), reward_model,
                      episodes=args.episodes, seed=rc.seed)
    report.write(out / REPORT_NAME)
    counts = confusion(report) if reward_model is not None else np.zeros((3, 3), np.int64)
    atomic_write_text(out / CONFUSION_NAME, confusion_csv(counts))
    for i in range(min(3, report.episodes)):
        export_traces(report, i, out / TRACES_DIR / f"ep{i:03d}")
    print(f"evaluated {report.episodes} episodes: "
          f"success={report.success_rate:.2f} collision={report.collision_rate:.2f} "
          f"timeout={report.timeout_rate:.2f} mean_speed={report.mean_speed:.2f}"
          f" -> {out / REPORT_NAME}")
    return 0


def _run_label(run_dir: Path) -> tuple[str, int]:
    resolved = run_dir / RESOLVED_NAME
    algorithm, model, vehicles = run_dir.name, "none", -1
    if resolved.exists():
        import configparser

        parser = configparser.ConfigParser()
        parser.read(resolved)
        algorithm = parser.get("run", "algorithm", fallback=run_dir.name)
        model = parser.get("reward", "model", fallback="none")
        vehicles = parser.getint("env", "initial_vehicle_count", fallback=-1)
    label = algorithm if model == "none" else f"{algorithm}+{model}"
    return label, vehicles


def cmd_compare(args: argparse.Namespace) -> int:
    run_dirs = [Path(d) for d in args.run_dirs]
    missing = [str(d) for d in run_dirs if not (d / REPORT_NAME).exists()]
    if missing:
        raise ConfigError("missing eval reports in: " + ", ".join(missing))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    curves = []
    for run_dir in run_dirs:
        report = load_report(run_dir / REPORT_NAME)
        label, vehicles = _run_label(run_dir)
        rows.append((label, vehicles, report.success_rate, report.collision_rate,
                     report.timeout_rate))
        log_path = run_dir / TRAIN_LOG_NAME
        if log_path.exists():
            with open(log_path, newline="") as fh:
                reader = csv.DictReader(fh)
                returns = [float(r["ep_return"]) for r in reader]
            curves.append((f"{label} ({run_dir.name})",
                           list(range(len(returns))), returns))
    lines = ["method,vehicles,success_rate,collision_rate,timeout_rate"]
    for label, vehicles, s, c, t in rows:
        lines.append(f"{label},{vehicles},{s!r},{c!r},{t!r}")
    atomic_write_text(out / "comparison.csv", "\n".join(lines) + "\n")
    line_plot(curves, out / "reward_curves.svg", title="Episode return during training",
              xlabel="episode", ylabel="shaped return")
    print(f"compared {len(run_dirs)} runs -> {out / 'comparison.csv'}")
    return 0


def cmd_export_pgm(args: argparse.Namespace) -> int:
    rc = load_run_config(args.config, seed_override=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = replace(rc.env, seed=rc.seed if args.seed is not None else rc.env.seed)
    env = IntersectionEnv(scenario)
    rng = np.random.default_rng(scenario.seed)
    state, obs = env.reset()
    labels = ["frame,action_id"]
    for i in range(args.frames):
        name = f"frame_{i:05d}.pgm"
        write_pgm(obs.frames[-1], out / name)
        labels.append(f"{name},{int(rule_oracle(obs.features).suggested)}")
        action = int(rng.integers(3))
        state, _ = env.step(action)
        if state.done:
            state, obs = env.reset()
        else:
            obs = push_frame(obs, render(state), features(state))
    atomic_write_text(out / "labels.csv", "\n".join(labels) + "\n")
    print(f"wrote {args.frames} frames and labels.csv -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossdrive",
        description="Intersection RL training, evaluation and reporting")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train per config and write a run directory")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override run seed")
    p_train.add_argument("--out", default=None, help="override output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate trained weights")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--weights", default=None)
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare", help="tabulate several run directories")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_pgm = sub.add_parser("export-pgm", help="export observation frames as PGM")
    p_pgm.add_argument("--config", required=True)
    p_pgm.add_argument("--out", required=True)
    p_pgm.add_argument("--frames", type=int, default=50)
    p_pgm.add_argument("--seed", type=int, default=None)
    p_pgm.set_defaults(func=cmd_export_pgm)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
