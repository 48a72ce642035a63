"""Command line: ``p2pfaas run | sweep | paper-tables``.

Exit codes: 0 success, 1 runtime abort or table mismatch, 2 invalid config.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .costs import compare_architectures, cost_rows_csv, format_published_tables, load_published_tables, reproduce_published_tables
from .errors import ConfigError, P2PError
from .experiment import AXES, run_experiment, run_sweep

log = logging.getLogger("p2pfaas")


def _load(args):
    if args.config:
        return cfgmod.load(args.config, args.seed)
    return cfgmod.build({} if args.seed is None else {"seed": str(args.seed)})


def cmd_run(args) -> int:
    config = _load(args)
    outcome = run_experiment(config, args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    if not outcome.ok:
        for err in outcome.cluster.errors:
            print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    config = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()] if args.values else []
    if not values:
        raise ConfigError("--values must list at least one value", ["--values"])
    results = run_sweep(config, args.axis, values, args.out)
    print((Path(args.out) / "sweep.csv").read_text(), end="")
    failed = [row.value for row, outcome in results if not outcome.ok]
    if failed:
        print(f"error: runs aborted for values {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_paper_tables(args) -> int:
    tables = load_published_tables()
    tol = args.tolerance if args.tolerance is not None else tables["tolerance_usd"]
    cells = reproduce_published_tables(args.lambda_rate, args.ec2_rate, tables)
    print(format_published_tables(cells, tables))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "published_tables.csv").write_text(cost_rows_csv(cells))
    s1024 = next(c for c in cells if c.architecture == "serverless" and c.batch_size == 1024)
    i1024 = next(c for c in cells if c.architecture == "instance" and c.batch_size == 1024)
    if i1024.computed_usd > 0:
        cmp = compare_architectures(s1024.report, i1024.report)
        print(f"batch 1024: cost ratio serverless/instance = {cmp.cost_ratio:.2f}, "
              f"compute-time reduction = {cmp.time_reduction_pct:.2f}%")
    if args.lambda_rate is not None or args.ec2_rate is not None:
        return 0
    bad = [c for c in cells if abs(c.error) > tol]
    for c in cells:
        status = "ok" if abs(c.error) <= tol else "MISMATCH"
        print(f"{c.architecture:<10} batch {c.batch_size:>4}: computed {c.computed_usd:.5f} "
              f"published {c.published_usd:.5f} diff {c.error:+.5f}  {status}")
    if bad:
        print(f"{len(bad)} of {len(cells)} cells outside +/-{tol} USD", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="p2pfaas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="flat key = value run configuration")
        sp.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    sp = sub.add_parser("run", help="train P peers and write trace/cost/summary files")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="one run per value along a config axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(AXES))
    sp.add_argument("--values", required=True, help="comma-separated values, e.g. 2,4,8 or raw,qsgd:16")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("paper-tables", help="recompute the published serverless/instance cost tables")
    sp.add_argument("--out", type=Path, default=None, help="also write published_tables.csv here")
    sp.add_argument("--lambda-rate", type=float, default=None, help="override every lambda USD/s rate")
    sp.add_argument("--ec2-rate", type=float, default=None, help="override every EC2 USD/s rate")
    sp.add_argument("--tolerance", type=float, default=None, help="USD tolerance per cell")
    sp.set_defaults(func=cmd_paper_tables)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("P2PFAAS_LOG", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(threadName)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except P2PError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
