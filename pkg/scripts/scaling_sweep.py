"""Per-peer compute time and communication volume as the number of peers grows."""
import argparse
from pathlib import Path

from p2pfaas import config as cfgmod
from p2pfaas.executor import speed_factor_for
from p2pfaas.experiment import run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/scaling"))
    ap.add_argument("--peers", default="2,4,8")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--batch-ms", type=float, default=5.0)
    args = ap.parse_args()
    config = cfgmod.default_config(
        epochs=args.epochs, executor__mode="instance", executor__overhead_ms=0,
        executor__speed_factor=speed_factor_for(args.batch_ms / 1000, 64, 6),
    )
    results = run_sweep(config, "peers", args.peers.split(","), args.out)
    print(f"{'P':>3} {'compute s/epoch':>16} {'comm s/epoch':>13} {'bytes out':>10} {'bytes in':>10} {'acc':>7}")
    for row, _ in results:
        print(f"{row.value:>3} {row.compute_time:>16.4f} {row.comm_time:>13.4f} {row.bytes_sent:>10.0f} "
              f"{row.bytes_received:>10.0f} {row.accuracy:>7.4f}")


if __name__ == "__main__":
    main()
