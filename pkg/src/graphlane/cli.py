"""Command-line entry point: ``graphlane {train,eval,baseline,gradcheck,export}``.

Exit codes: 0 success, 1 invalid input (config, checkpoint), 2 runtime
failure (divergence, failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, dump_config, load_config
from .gradcheck import TOLERANCE, run_all
from .numerics import CheckpointError
from .qlearn import AlgoVariant, QNetwork
from .sim import baseline_policy, write_event_log
from .trainer import (aggregate_metrics, eval_sim_seed, evaluate, run_baseline, run_episode,
                      greedy_policy, train, write_metrics)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("graphlane")


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.output_dir={args.out}")
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    dump_config(cfg, out / "config.resolved.ini")
    status = train(cfg.scenario, cfg.encoder, cfg.training, cfg.seed, out, cfg.record_wall_time)
    aggregate_metrics(out)
    failed = {seed: why for seed, why in status.items() if why}
    for seed, why in failed.items():
        print(f"seed {seed} diverged: {why}", file=sys.stderr)
    print(f"trained {cfg.training.variant.value} for {cfg.training.seeds} seed(s) -> {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint == "baseline":
        print("the rule-based baseline has no checkpoint; use the 'baseline' command", file=sys.stderr)
        return EXIT_INVALID
    cfg = _resolve(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        print(f"checkpoint not found: {ckpt}", file=sys.stderr)
        return EXIT_INVALID
    expected = cfg.training.variant if "training.variant" in cfg.explicit else None
    net, variant = QNetwork.load(ckpt, expected)
    if net.n_features != 8:
        raise CheckpointError(f"{ckpt}: network expects {net.n_features} node features")
    mean, std, metrics = evaluate(net, cfg.scenario, cfg.encoder, args.episodes, cfg.seed)
    out = _out_dir(cfg)
    write_metrics(out / f"eval_{variant.value}_seed{cfg.seed}.csv", metrics, cfg.record_wall_time)
    if args.events:
        _, state = run_episode(greedy_policy(net), cfg.scenario, cfg.encoder, eval_sim_seed(cfg.seed, 0))
        write_event_log(state.event_log, args.events)
    print(f"{variant.value}: {mean:.2f} ± {std:.2f} over {args.episodes} episodes")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _resolve(args)
    mean, std, metrics = run_baseline(cfg.scenario, cfg.encoder, args.episodes, cfg.seed)
    out = _out_dir(cfg)
    write_metrics(out / f"metrics_baseline_seed{cfg.seed}.csv", metrics, cfg.record_wall_time)
    if args.events:
        _, state = run_episode(lambda s, o: baseline_policy(s, cfg.scenario), cfg.scenario, cfg.encoder,
                               eval_sim_seed(cfg.seed, 0))
        write_event_log(state.event_log, args.events)
    print(f"baseline: {mean:.2f} ± {std:.2f} over {args.episodes} episodes")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, targets, elapsed = run_all(args.seed or 0, corrupt_gcn=args.corrupt_gcn)
    ok = True
    for res in results:
        flag = "ok" if res.passed else "FAIL"
        print(f"{res.name:<14} max rel err {res.max_rel_error:.3e} over {res.instances} instances  {flag}")
        ok &= res.passed
    for name, matched in targets:
        print(f"target {name:<26} {'ok' if matched else 'FAIL'}")
        ok &= bool(matched)
    print(f"tolerance {TOLERANCE:g}, {elapsed:.2f} s")
    if not ok:
        failing = [r.name for r in results if not r.passed] + [n for n, m in targets if not m]
        print("gradient check failed: " + ", ".join(failing), file=sys.stderr)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_export(args) -> int:
    out = Path(args.out or (load_config(args.config).output_dir if args.config else "runs/default"))
    if not out.is_dir():
        print(f"no run directory at {out}", file=sys.stderr)
        return EXIT_INVALID
    dest = aggregate_metrics(out, args.dest)
    print(f"wrote {dest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphlane", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, episodes=False):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="root seed for every random stream")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. training.variant=d3qn (repeatable)")
        p.add_argument("--out", help="output directory")
        if episodes:
            p.add_argument("--episodes", type=int, default=10)
            p.add_argument("--events", help="write the event log of the first episode to this CSV")

    p = sub.add_parser("train", help="train one variant over the configured seeds")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("checkpoint")
    common(p, episodes=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run the rule-based controller")
    common(p, episodes=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference and TD-target self-check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gcn", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="merge per-seed metrics into metrics_aggregate.csv")
    p.add_argument("--config")
    p.add_argument("--out", help="run directory holding metrics_*_seed*.csv")
    p.add_argument("--dest", help="aggregate file path (default <out>/metrics_aggregate.csv)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level: report and map to the runtime code
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
