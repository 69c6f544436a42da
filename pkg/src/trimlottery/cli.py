"""Command line: run, report, inspect, verify."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from . import lottery as L
from . import tasks
from .model import CheckpointFormatError, cost_report, load_checkpoint


def _add_sweep_flags(p):
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--task", choices=sorted(tasks.TASKS))
    p.add_argument("--strategy", choices=L.STRATEGIES, action="append",
                   help="repeatable; overrides the config's strategy list")
    p.add_argument("--criterion", choices=L.CRITERIA, action="append",
                   help="repeatable; overrides the config's criterion list")
    p.add_argument("--scope", choices=L.SCOPES)
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", help="output directory")


def _overrides(args):
    return {
        "task": args.task,
        "strategies": tuple(args.strategy) if args.strategy else None,
        "criteria": tuple(args.criterion) if args.criterion else None,
        "scope": args.scope,
        "base_seed": args.seed,
        "out": args.out,
    }


def cmd_run(args):
    cfg = H.parse_config(args.config, overrides=_overrides(args))
    records = H.run_sweep(cfg)
    print(f"{len(records)} records in {Path(cfg.out) / 'records.csv'}")
    print((Path(cfg.out) / "summary.txt").read_text())
    return 0


def cmd_report(args):
    out = Path(args.out)
    source = out / "records.csv"
    records = H.read_records(source)
    if not records:
        print(f"no records in {source}", file=sys.stderr)
        return 1
    for path in H.emit_reports(records, H.select_models(records), out):
        print(path)
    return 0


def cmd_inspect(args):
    try:
        model, meta = load_checkpoint(args.checkpoint, return_meta=True)
    except (OSError, CheckpointFormatError) as exc:
        print(f"cannot read {args.checkpoint}: {exc}", file=sys.stderr)
        return 1
    cost = cost_report(model)
    print(f"checkpoint   {args.checkpoint} ({meta['role']}, epoch {meta['epoch']})")
    print(f"input shape  {model.input_shape}")
    print(f"widths       {[model.layers[i].width for i in model.weight_layers()]}")
    print(f"params       {cost.param_count}")
    print(f"disk bytes   {cost.disk_size}")
    print(f"flops        {cost.flops}")
    print(f"memory bytes {cost.memory}")
    return 0


def cmd_verify(args):
    from . import verify

    names = args.suite or None
    results = verify.run_suites(names)
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="trimlottery", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a sweep")
    _add_sweep_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="regenerate curves, table and summary from records.csv")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="print the cost report of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="run the exact property suites")
    from .verify import SUITES

    p.add_argument("--suite", action="append", choices=sorted(SUITES))
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except H.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
