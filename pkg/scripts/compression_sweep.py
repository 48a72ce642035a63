"""Raw vs. QSGD-encoded gradient exchange: bytes on the wire, time, and accuracy."""
import argparse
from pathlib import Path

from p2pfaas import config as cfgmod
from p2pfaas.experiment import run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/compression"))
    ap.add_argument("--encodings", default="raw,qsgd:4,qsgd:16,qsgd:256")
    ap.add_argument("--model", default="mlp:2,256,64,2")
    ap.add_argument("--bandwidth", type=float, default=2e6, help="link bytes/s; 0 disables the delay")
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    config = cfgmod.default_config(
        model=args.model, peers=4, epochs=args.epochs, executor__overhead_ms=0, executor__speed_factor=0.01,
        broker__bandwidth_bytes_per_s=args.bandwidth,
    )
    results = run_sweep(config, "encoding", args.encodings.split(","), args.out)
    print(f"{'encoding':<10} {'bytes out':>10} {'bytes in':>10} {'comm s/epoch':>13} {'acc':>7}")
    for row, _ in results:
        print(f"{row.value:<10} {row.bytes_sent:>10.0f} {row.bytes_received:>10.0f} {row.comm_time:>13.4f} "
              f"{row.accuracy:>7.4f}")


if __name__ == "__main__":
    main()
