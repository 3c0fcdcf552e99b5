"""Command line entry point: ``rlltv <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 protocol violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import experiment as X
from . import market as M
from .config import ExperimentConfig, apply, load_config
from .mdp import episode_records
from .nn import ConfigError, NumericError
from .trainer import Agent, episodes_from_days, DayLog

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PROTOCOL = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        apply(cfg, k.strip(), v.strip())
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "sessions", None) is not None:
        cfg.run.sessions = args.sessions
    if getattr(args, "out", None):
        cfg.run.out_dir = args.out
    return cfg.validate()


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` (inclusive stop) or a comma list."""
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(round((hi - lo) / step))
            return np.round(lo + step * np.arange(n + 1), 10)
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; use start:stop:step") from None


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    st = M.initial_state(cfg.sim)
    logs = []
    for _ in range(args.days):
        k = len(st)
        y, p = np.full(k, 0.5), np.full(k, cfg.trainer.price_value)
        res = M.advance(st, y, p, lambda ids, yc, yr: yc)
        logs.append(DayLog(res, y, p, np.zeros(k), np.zeros(k)))
    episodes = episodes_from_days(logs)
    with open(out / "episodes.jsonl", "w") as fh:
        for ep in episodes:
            for rec in episode_records(ep, cfg.sim.content_dim):
                fh.write(json.dumps(rec) + "\n")
    E.Trace.from_logs(logs, cfg.sim.content_dim).save(out / "sim_trace.npz")
    print(f"{len(episodes)} episodes over {args.days} days -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.ablate:
        cfg = X.ablated(cfg, args.ablate)
        if args.out:
            cfg.run.out_dir = args.out
    out = X.run_experiment(cfg)
    print((out / "report.txt").read_text(), end="")
    print(f"artifacts: {out}")
    return EXIT_OK


def _load_eval_inputs(args):
    ckpt = Path(args.checkpoint)
    agent = Agent.load(ckpt)
    trace = E.Trace.load(args.trace)
    run_dir = ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt.parent
    cfg_path = Path(args.config) if args.config else run_dir / "config.txt"
    cfg = load_config(cfg_path) if cfg_path.exists() else ExperimentConfig()
    return agent, trace, cfg, run_dir


def cmd_eval(args) -> int:
    agent, trace, cfg, run_dir = _load_eval_inputs(args)
    train_path = Path(args.train_trace) if args.train_trace else run_dir / "train_trace.npz"
    if not train_path.exists():
        raise ConfigError(f"training trace not found at {train_path}; pass --train-trace")
    train_trace = E.Trace.load(train_path)
    res = X.evaluate(cfg, agent, train_trace, trace, int(agent.opt_critic.step))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X.write_report(out, res, cfg.eval.ks)
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    agent, trace, cfg, _ = _load_eval_inputs(args)
    J = trace.returns(cfg.trainer.gamma, cfg.eval.return_window)
    lists = E.eval_lists(trace, J, X.eval_days(cfg, trace), cfg.eval.list_size,
                         np.random.default_rng([cfg.run.seed, 47]), cfg.eval.cold_age, cfg.sim.content_dim)
    _, y_rl = E.score_trace(agent.params, agent.model, agent.normalizer, trace)
    curve = E.alpha_sweep(parse_grid(args.grid), lists, J, [d.y_ctr for d in trace.days], y_rl, trace, cfg.eval.ks)
    E.write_csv(args.out, curve)
    for row in curve:
        print(" ".join(f"{k}={v:.4f}" for k, v in row.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    table = X.ablation_study(cfg)
    print(E.format_table(table, [f"ndcg@{k}" for k in cfg.eval.ks]))
    return EXIT_OK


def cmd_compare(args) -> int:
    rep = X.compare_arms(args.arms, baseline=args.baseline)
    text = json.dumps(rep, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlltv", description="Lifetime-value ranking experiments on a synthetic market.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
        if seed:
            sp.add_argument("--seed", type=int)

    s = sub.add_parser("simulate", help="run the market under click-model ranking and log episodes")
    common(s)
    s.add_argument("--days", type=int, default=14)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("train", help="train, evaluate and write a run directory")
    common(s)
    s.add_argument("--sessions", type=int)
    s.add_argument("--ablate", choices=sorted(X.ABLATIONS))
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="offline metrics for a checkpoint on a trace")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--train-trace")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep-alpha", help="fixed-alpha sweep of the blended score")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--config")
    s.add_argument("--grid", default="0:1:0.05")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ablate", help="full agent versus each ablation on one seed")
    common(s)
    s.add_argument("--sessions", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("compare", help="compare cold-start arms")
    s.add_argument("arms", nargs="+")
    s.add_argument("--baseline", default="ctr")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except X.ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
