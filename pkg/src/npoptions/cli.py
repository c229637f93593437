"""Command-line entry point: ``npoptions <command> ...``.

Exit codes: 0 success, 2 usage error, 3 numerical abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import experiments as E
from . import smdp
from .training import (NumericalAbort, Schedule, TrainConfig, load_checkpoint, save_checkpoint,
                       train)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("npoptions")


class UsageError(Exception):
    pass


def _write_json(obj, path: Path | None):
    text = json.dumps(obj, indent=2, default=float)
    if path is None:
        print(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")


# -- gen-data ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n_traj < 1:
        raise UsageError("--n-traj must be >= 1")
    rng = np.random.default_rng(args.seed)
    if args.env == "message":
        if args.T is not None and args.T != D.MESSAGE_T:
            raise UsageError(f"the message task has a fixed horizon of {D.MESSAGE_T} actions")
        if args.n_vocab is None or args.n_vocab < 2:
            raise UsageError("--env message needs --n-vocab >= 2")
        ds = D.message_env_expert(D.MessageEnvConfig(args.n_vocab, args.filler), args.n_traj, rng)
    else:
        T = args.T or 10
        if T < 1:
            raise UsageError("--T must be >= 1")
        if args.env == "options-synthetic":
            ds = D.synthetic_options_dataset(args.n_traj, T, args.K, rng)
        else:
            ds = D.synthetic_compile_dataset(args.n_traj, T, args.K, rng, rate=args.rate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.dataset_write(ds, out)
    log.info("wrote %d trajectories to %s", len(ds), out)
    return EXIT_OK


# -- train ---------------------------------------------------------------------

RUN_KEYS = ("dataset", "output_dir")


def load_run_config(path) -> tuple[TrainConfig, dict]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    run = {k: raw.pop(k) for k in RUN_KEYS if k in raw}
    base = TrainConfig().to_dict()
    try:
        cfg = TrainConfig.from_dict({**base, **raw})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return cfg, run


def cmd_train(args) -> int:
    cfg, run = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.no_growth:
        cfg = replace(cfg, growth=replace(cfg.growth, enabled=False))
    if args.lambda_ent is not None:
        cfg = replace(cfg, lambda_ent=replace(cfg.lambda_ent, initial=args.lambda_ent))
    dataset_path = args.dataset or run.get("dataset")
    out_dir = args.out or run.get("output_dir")
    if not dataset_path or not out_dir:
        raise UsageError("a dataset path and an output directory are required")
    dataset_path = Path(dataset_path)
    if not dataset_path.is_absolute() and not dataset_path.exists():
        dataset_path = Path(args.config).parent / dataset_path
    dataset = D.dataset_read(dataset_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg.to_dict(), "dataset": str(dataset_path.resolve()), "output_dir": str(out)}
    _write_json(resolved, out / "config.json")
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    try:
        result = train(dataset, cfg, metrics_path=metrics)
    except NumericalAbort as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint.json")
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(result.state, out / "checkpoint.json")
    log.info("finished: K=%d after %d epochs", result.state.K, result.state.epoch)
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = D.dataset_read(args.dataset)
    if ds.state_dim != state.bank.state_dim or ds.n_actions != state.bank.n_actions:
        raise UsageError(f"checkpoint expects state_dim={state.bank.state_dim}, "
                         f"n_actions={state.bank.n_actions}; dataset has {ds.state_dim}, "
                         f"{ds.n_actions}")
    n_vocab = ds.meta.get("n_vocab", ds.n_actions)
    _write_json(E.message_report(state, ds, n_vocab), Path(args.out) if args.out else None)
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------

def cmd_sweep(args) -> int:
    overrides = json.loads(Path(args.config).read_text()) if args.config else None
    if overrides:
        for k in RUN_KEYS:
            overrides.pop(k, None)
    seeds = list(range(args.seed, args.seed + args.seeds))
    lambdas = [None] + ([0.0] if args.ablation else [])
    rows = E.run_sweep(args.n_vocab, seeds, profile=args.profile, lambda_ents=lambdas,
                       filler=args.filler, workers=args.workers, overrides=overrides,
                       epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_csv(rows, out / "cells.csv")
    agg = E.aggregate(rows)
    E.write_csv(agg, out / "aggregate.csv")
    summary = E.summarize(rows, agg)
    _write_json(summary, out / "summary.json")
    print(json.dumps(summary, default=float))
    return EXIT_OK


# -- augmented -----------------------------------------------------------------

def cmd_augmented(args) -> int:
    env = smdp.env_from_spec(args.env_spec) if args.env_spec else smdp.chain_env()
    if args.checkpoint:
        if not args.features:
            raise UsageError("--checkpoint needs --features (JSON array, one row per state)")
        feats = np.asarray(json.loads(Path(args.features).read_text()), dtype=float)
        env.skills.extend(smdp.skills_from_checkpoint(args.checkpoint, feats))
        env = smdp.AugmentedEnv(env.transitions, env.rewards, env.gamma, env.skills, env.cap,
                                env.terminal, env.start)
    if args.no_skills:
        env = env.without_skills()
    oracle = smdp.smdp_value_iteration(env)
    cfg = smdp.LearnerConfig(steps=args.steps, lr=args.lr, epsilon=args.epsilon,
                             log_every=args.log_every, naive=args.naive)
    Q, rows = smdp.q_learning(env, cfg, np.random.default_rng(args.seed), oracle=oracle)
    if args.out:
        smdp.write_curve(rows, args.out)
    gap = smdp.q_gap(Q, oracle, env)
    print(json.dumps({"n_actions": env.n_actions, "final_q_gap": gap,
                      "final_mean_return": rows[-1]["mean_return"] if rows else math.nan}))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npoptions", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an expert dataset (JSON Lines)")
    g.add_argument("--env", choices=["message", "options-synthetic", "compile-synthetic"],
                   default="message")
    g.add_argument("--n-vocab", type=int)
    g.add_argument("--n-traj", type=int, default=1000)
    g.add_argument("--T", type=int)
    g.add_argument("--K", type=int, default=3, help="options / skills for synthetic envs")
    g.add_argument("--rate", type=float, default=3.0, help="Poisson segment rate")
    g.add_argument("--filler", choices=["repeat", "constant"], default="repeat")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config into a run directory")
    t.add_argument("config")
    t.add_argument("--dataset")
    t.add_argument("--out", help="run directory (overrides output_dir)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-growth", action="store_true")
    t.add_argument("--lambda-ent", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="vocabulary-size x seed grid on the message task")
    s.add_argument("--n-vocab", type=int, nargs="+", default=[2, 4, 6])
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--profile", choices=sorted(E.PROFILES), default="reduced")
    s.add_argument("--epochs", type=int)
    s.add_argument("--config", help="JSON training overrides")
    s.add_argument("--filler", choices=["repeat", "constant"], default="repeat")
    s.add_argument("--ablation", action="store_true", help="also run with lambda_ent = 0")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("augmented", help="SMDP Q-learning on a skill-augmented tabular env")
    a.add_argument("--env-spec", help="JSON env spec (default: bundled 6-state chain)")
    a.add_argument("--checkpoint")
    a.add_argument("--features")
    a.add_argument("--no-skills", action="store_true")
    a.add_argument("--naive", action="store_true", help="use gamma instead of gamma**tau")
    a.add_argument("--steps", type=int, default=50_000)
    a.add_argument("--lr", type=float, default=0.5)
    a.add_argument("--epsilon", type=float, default=0.1)
    a.add_argument("--log-every", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_augmented)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except D.DatasetFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
