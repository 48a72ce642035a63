"""Validation loss per epoch for synchronous and asynchronous training."""
import argparse
import csv
from pathlib import Path

from p2pfaas import config as cfgmod
from p2pfaas.experiment import run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/sync_vs_async"))
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    config = cfgmod.load(args.config) if args.config else cfgmod.default_config(
        executor__overhead_ms=5, executor__speed_factor=2200,
    )
    config = config.override("epochs", args.epochs)
    run_sweep(config, "mode", ["sync", "async"], args.out)
    curves = {}
    for mode in ("sync", "async"):
        with open(args.out / f"loss_curve_mode={mode}.csv") as f:
            curves[mode] = {int(r["epoch"]): float(r["mean_loss"]) for r in csv.DictReader(f)}
    print(f"{'epoch':>5} {'sync loss':>10} {'async loss':>11}")
    for e in sorted(set(curves["sync"]) | set(curves["async"])):
        s, a = curves["sync"].get(e), curves["async"].get(e)
        print(f"{e:>5} {'' if s is None else f'{s:.5f}':>10} {'' if a is None else f'{a:.5f}':>11}")


if __name__ == "__main__":
    main()
