"""Gradient-computation wall time vs. executor concurrency for one peer's epoch.

Writes ``speedup.csv`` with one row per concurrency level plus the sequential
instance baseline.
"""
import argparse
import csv
from pathlib import Path

from p2pfaas.core import Batch, init_model, logistic_regression
from p2pfaas.dataset import DatasetSpec, ObjectStore, Partition, generate, store_batches
from p2pfaas.executor import INSTANCE, SERVERLESS, ExecutorConfig, build_fanout_plan, execute, speed_factor_for


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/speedup"))
    ap.add_argument("--batches", type=int, default=15)
    ap.add_argument("--batch-ms", type=float, default=100.0, help="simulated compute per batch")
    ap.add_argument("--overhead-ms", type=float, default=50.0)
    ap.add_argument("--levels", default="1,2,4,8,15")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    B = 64
    data = generate(DatasetSpec(samples=max(2000, 2 * B * args.batches)))
    batches = [Batch(data.x_train[j * B:(j + 1) * B], data.y_train[j * B:(j + 1) * B], j) for j in range(args.batches)]
    store = ObjectStore(args.out / "store")
    model = init_model(logistic_regression(2, 2), 0)
    plan = build_fanout_plan(store_batches(store, Partition(0, batches, 0)), store.put(model.to_bytes()))
    sf = speed_factor_for(args.batch_ms / 1000, B, model.arch.param_count)

    rows = [("instance", 1, execute(plan, ExecutorConfig(INSTANCE, simulated_speed_factor=sf), store)[2])]
    for k in (int(x) for x in args.levels.split(",")):
        cfg = ExecutorConfig(SERVERLESS, max_concurrency=k, invocation_overhead_ms=args.overhead_ms,
                             simulated_speed_factor=sf)
        rows.append(("serverless", k, execute(plan, cfg, store)[2]))
    base = rows[0][2]
    with open(args.out / "speedup.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["executor", "concurrency", "wall_s", "speedup", "reduction_pct"])
        for mode, k, wall in rows:
            w.writerow([mode, k, f"{wall:.4f}", f"{base / wall:.3f}", f"{100 * (base - wall) / base:.2f}"])
            print(f"{mode:<11} k={k:<3} wall {wall:7.3f} s  speedup {base / wall:6.2f}  "
                  f"reduction {100 * (base - wall) / base:6.2f}%")
    for key in store.keys():
        store.delete(key)


if __name__ == "__main__":
    main()
