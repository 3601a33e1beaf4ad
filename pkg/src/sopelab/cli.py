"""Command line entry point: ``sopelab <command> ...``.

Commands
    bootstrap   train source policies for one environment and compute anchors
    gen-data    write the three tier datasets from the source policies
    run         one training run from a config file plus overrides
    sweep       a grid over one config key (e.g. patience, n_fix) and seeds
    report      aggregate run or sweep directories into summary CSVs
    export-csv  dump a dataset file as CSV

Exit status is 0 on success, 2 for bad usage, otherwise the ``exit_code``
of the raised :class:`sopelab.errors.SopeError` subclass.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from . import data, envlab, report
from .config import ScheduleConfig, format_value, load_config, parse_overrides, parse_value
from .driver import run
from .errors import ConfigError, SopeError

log = logging.getLogger("sopelab")


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    group = p.add_argument_group("config overrides")
    for f in fields(ScheduleConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="extra config overrides")


def _config_from_args(args, **extra):
    values = {}
    for f in fields(ScheduleConfig):
        raw = getattr(args, "cfg_" + f.name)
        if raw is not None:
            values[f.name] = parse_value(f.name, raw)
    values.update(parse_overrides(args.overrides))
    values.update(extra)
    return load_config(args.config, **values)


def _default_run_dir(cfg):
    return Path("runs") / f"{cfg.schedule}-{envlab.make_spec(cfg.env).name}-{cfg.tier}-seed{cfg.seed}"


def cmd_bootstrap(args):
    env = envlab.make_spec(args.env).name
    steps = args.steps or data.DEFAULT_BOOTSTRAP_STEPS[env]
    cfg = data.BootstrapConfig(env=env, steps=steps, seed=args.seed, anchor_episodes=args.anchor_episodes)
    anchors = data.bootstrap(cfg, args.data_dir)
    print(f"{env}: random {anchors.random_return:.3f}, expert {anchors.expert_return:.3f}")


def cmd_gen_data(args):
    paths = data.generate_all(args.env, args.count, args.seed, args.data_dir, tuple(args.tiers.split(",")))
    for tier, path in paths.items():
        print(f"{tier}: {path}")


def cmd_run(args):
    cfg = _config_from_args(args)
    out = Path(args.out) if args.out else _default_run_dir(cfg)
    result = run(cfg, out_dir=out)
    print(f"{out}: final score {result.final_score:.2f}, gradient updates {result.grad_updates}")


def _sweep_one(job):
    cfg, out = job
    result = run(cfg, out_dir=out)
    return str(out), result.final_score


def cmd_sweep(args):
    extra = {}
    if args.param == "n_fix" and args.cfg_schedule is None:
        extra["schedule"] = "speq_fixed"
    base = _config_from_args(args, **extra)
    values = [parse_value(args.param, v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out or Path("sweeps") / args.param)
    jobs = []
    for value in values:
        for seed in seeds:
            cfg = base.replace(**{args.param: value, "seed": seed})
            cfg.validate()
            jobs.append((cfg, out / f"{args.param}={format_value(value)}" / f"seed{seed}"))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            done = list(pool.map(_sweep_one, jobs))
    else:
        done = [_sweep_one(job) for job in jobs]
    for path, score in done:
        print(f"{path}: final score {score:.2f}")
    report.compare_sweep(out)
    print(f"comparison: {out / 'comparison.csv'}")


def cmd_report(args):
    out = Path(args.out)
    for d in args.dirs:
        if any("=" in p.name for p in Path(d).iterdir() if p.is_dir()):
            report.compare_sweep(d, out / f"{Path(d).name}_comparison.csv")
            print(f"sweep {d} -> {out}")
            continue
        runs = report.find_runs(d)
        target = out if len(args.dirs) == 1 else out / Path(d).name
        report.aggregate(runs, target)
        print(f"{len(runs)} runs in {d} -> {target}")


def cmd_export_csv(args):
    envlab.dataset_to_csv(envlab.load_dataset(args.dataset), args.output)


def build_parser():
    parser = argparse.ArgumentParser(prog="sopelab", description="Offline-to-online SAC with adaptive stabilization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bootstrap", help="train source policies and compute score anchors")
    p.add_argument("--env", default="pendulum")
    p.add_argument("--steps", type=int, help="SAC training steps (default depends on env)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anchor-episodes", type=int, default=100)
    p.add_argument("--data-dir")
    p.set_defaults(fn=cmd_bootstrap)

    p = sub.add_parser("gen-data", help="write tier datasets")
    p.add_argument("--env", default="pendulum")
    p.add_argument("--count", type=int, default=data.DEFAULT_DATASET_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiers", default=",".join(envlab.TIERS))
    p.add_argument("--data-dir")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("run", help="one training run")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default runs/<schedule>-<env>-<tier>-seed<seed>)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="grid over one config key and seeds")
    p.add_argument("--param", required=True, help="config key to vary, e.g. patience or n_fix")
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--seeds", default="0")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run or sweep directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", default="report")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("export-csv", help="dump a dataset file as CSV")
    p.add_argument("dataset")
    p.add_argument("output")
    p.set_defaults(fn=cmd_export_csv)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "param", None) is not None and args.param not in {f.name for f in fields(ScheduleConfig)}:
            raise ConfigError(f"unknown sweep parameter {args.param!r}")
        args.fn(args)
    except SopeError as exc:
        print(f"sopelab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
