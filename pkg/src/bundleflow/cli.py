"""Command-line entry point.

Exit codes: 0 ok, 2 config error, 3 parse error, 4 missing checkpoint or
file, 5 numeric divergence. The default output root is ``$BUNDLEFLOW_OUT``
(falling back to ``./runs``) unless the config sets ``out_root``.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import __version__, config as config_mod, pipeline
from .checkpoint import CheckpointError
from .flow import NumericOverflowError
from .stage1 import TrainingError
from .valuations import CatsFormatError, CatsParseError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4, 5


def _config(args):
    return config_mod.load(args.config, args.set)


def cmd_gen_data(args):
    cfg = _config(args)
    train, test = pipeline.gen_data(cfg)
    p_train, p_test = pipeline.data_paths(cfg)
    print(f"train {len(train)} -> {p_train}")
    print(f"test  {len(test)} -> {p_test}")


def cmd_train_flow(args):
    cfg = _config(args)
    trainer = pipeline.train_flow(cfg, resume=args.resume, max_steps=args.max_steps)
    log = trainer.state.log
    ck, _ = pipeline.flow_paths(cfg)
    print(f"iteration {trainer.state.iteration} loss {log[-1][1]:.6g} -> {ck}")


def cmd_train_menu(args):
    cfg = _config(args)
    trainer, vf, _, test = pipeline.train_menu(cfg, resume=args.resume,
                                               max_steps=args.max_steps, flow_path=args.flow)
    ck, _, _ = pipeline.menu_paths(cfg)
    print(f"iteration {trainer.state.iteration} test revenue {trainer.test_revenue():.6g} -> {ck}")
    if trainer.state.iteration == cfg.menu.iterations:
        report, out = pipeline.evaluate(cfg, ck)
        print(f"report -> {out}")


def cmd_train_baseline(args):
    cfg = _config(args)
    which = args.which or cfg.baseline.which
    if which not in config_mod.BASELINES:
        raise ConfigError(f"baseline.which: must be one of {config_mod.BASELINES}")
    pipeline.train_baseline(cfg, which)
    path = pipeline.baseline_path(cfg, which)
    report, out = pipeline.evaluate(cfg, path, which)
    print(f"{which}: test revenue {report.test_revenue:.6g} -> {path}")


def cmd_evaluate(args):
    cfg = _config(args)
    path = args.checkpoint or pipeline.menu_paths(cfg)[0]
    report, out = pipeline.evaluate(cfg, path, args.name)
    print(report.to_json())
    print(f"-> {out}", file=sys.stderr)


def cmd_sweep(args):
    cfg = _config(args)
    try:
        values = [int(x) for x in args.values.split(",") if x.strip()]
        seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("sweep: --values and --seeds take comma-separated integers") from None
    if not values or not seeds:
        raise ConfigError("sweep: --values and --seeds must be nonempty")
    table, out = pipeline.sweep(cfg, args.param, values, seeds)
    for row in table:
        print(f"{args.param}={row['value']}: median {row['median']:.6g}")
    print(f"-> {out}")


def cmd_export_snapshots(args):
    cfg = _config(args)
    paths = pipeline.export_snapshots(cfg, args.interval)
    print(f"{len(paths)} snapshots -> {cfg.run_dir / 'snapshots'}")


def cmd_show_config(args):
    print(_config(args).dump(), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="bundleflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. menu.K=32 (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate or import a dataset")
    s.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train-flow", cmd_train_flow, "Stage 1: fit the vector field"),
                                 ("train-menu", cmd_train_menu, "Stage 2: train the menu")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
        s.add_argument("--max-steps", type=int, default=None,
                       help="stop after this iteration (schedules still use the full length)")
        if name == "train-menu":
            s.add_argument("--flow", help="Stage-1 checkpoint (default: the run's own)")
        s.set_defaults(func=func)

    s = sub.add_parser("train-baseline", parents=[common], help="train a comparison mechanism")
    s.add_argument("which", nargs="?", choices=config_mod.BASELINES)
    s.set_defaults(func=cmd_train_baseline)

    s = sub.add_parser("evaluate", parents=[common], help="revenue, DSIC and IR report")
    s.add_argument("checkpoint", nargs="?", help="menu or baseline checkpoint")
    s.add_argument("--name", help="report name (default: mechanism name)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", parents=[common], help="D or K ablation over seeds")
    s.add_argument("param", choices=("D", "K"))
    s.add_argument("--values", required=True, help="comma-separated, e.g. 1,2,4")
    s.add_argument("--seeds", default="0,1,2")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("export-snapshots", parents=[common], help="menu snapshots over training")
    s.add_argument("--interval", type=int, default=None,
                   help="multiple of menu.snapshot_interval (default: that interval)")
    s.set_defaults(func=cmd_export_snapshots)

    s = sub.add_parser("show-config", parents=[common], help="print the effective config")
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CatsParseError, CatsFormatError, CheckpointError, config_mod.ConfigParseError,
            json.JSONDecodeError) as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, NumericOverflowError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
