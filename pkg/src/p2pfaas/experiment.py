"""Run directories: one cluster run, or a sweep of runs along one config axis."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .costs import (
    STAGE_LABELS,
    CostInputs,
    MetricsRecorder,
    StageSample,
    instance_report,
    serverless_report,
    summaries_csv,
)
from .dataset import ObjectStore, generate
from .errors import ConfigError
from .executor import SERVERLESS
from .trainer import ClusterResult, run_cluster, traces_csv

log = logging.getLogger(__name__)

AXES = {"batch_size": "batch_size", "peers": "peers", "encoding": "encoding", "mode": "mode"}
COST_COLUMNS = [
    "run_id", "rank", "architecture", "num_batches", "lambda_memory_mb", "lambda_rate_usd_per_s",
    "ec2_rate_usd_per_s", "computation_time_s", "cost_per_peer_usd", "measured_invocation_billing_usd",
]
SWEEP_COLUMNS = [
    "axis", "value", "compute_time", "comm_time", "cost", "accuracy",
    "bytes_sent", "bytes_received", "epochs", "ok",
]


def run_id_for(config: RunConfig) -> str:
    return hashlib.sha256(config.snapshot().encode()).hexdigest()[:12]


@dataclass
class RunOutcome:
    run_id: str
    out_dir: Path
    cluster: ClusterResult
    cost_reports: list

    @property
    def ok(self) -> bool:
        return self.cluster.ok

    def final_digest(self) -> str:
        """Checksum over every peer's final model (rank order)."""
        h = hashlib.sha256()
        for p in self.cluster.peers:
            h.update(b"" if p is None or p.model is None else p.model.values.tobytes())
        return h.hexdigest()


def peer_cost_report(config: RunConfig, peer):
    """Per-peer cost from the measured compute-stage time of one training run."""
    ex = config.peer.executor
    traces = peer.traces
    compute = sum(t.compute_s for t in traces)
    batches = max(1, round(float(np.mean([t.num_batches for t in traces])))) if traces else 1
    inputs = CostInputs(batches, ex.lambda_rate_usd_per_s, ex.instance_rate_usd_per_s, compute, ex.lambda_memory_mb)
    if ex.mode == SERVERLESS:
        return serverless_report(inputs, sum(t.lambda_cost_usd for t in traces))
    return instance_report(inputs)


def _merge_recorders(result: ClusterResult) -> MetricsRecorder:
    merged = MetricsRecorder(poll_interval_s=0)
    for p in result.peers:
        if p is not None and p.recorder is not None:
            merged.samples.extend(StageSample(**vars(s)) for s in p.recorder.samples)
    return merged


def run_experiment(config: RunConfig, out_dir) -> RunOutcome:
    """Train P peers per ``config`` and write the run directory.

    Files: ``config.cfg`` (snapshot), ``trace.csv``, ``cost.csv``,
    ``stages.csv`` and ``summary.txt``; all are written even when a peer aborts.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = run_id_for(config)
    (out / "config.cfg").write_text(config.snapshot())

    data = generate(config.dataset)
    store = ObjectStore(out / "store")
    broker = config.make_broker(store)
    result = run_cluster(config.peer, data, store, broker)

    (out / "trace.csv").write_text(traces_csv(result.traces, run_id))
    reports = []
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(COST_COLUMNS)
    for rank, p in enumerate(result.peers):
        if p is None:
            continue
        rep = peer_cost_report(config, p)
        reports.append(rep)
        i = rep.inputs
        w.writerow([
            run_id, rank, rep.architecture, i.num_batches, i.lambda_memory_mb, i.lambda_rate_usd_per_s,
            i.ec2_rate_usd_per_s, f"{i.computation_time_s:.6f}", f"{rep.cost_per_peer_usd:.10f}",
            "" if rep.measured_lambda_cost_usd is None else f"{rep.measured_lambda_cost_usd:.10f}",
        ])
    (out / "cost.csv").write_text(buf.getvalue())
    stages = _merge_recorders(result).summarize()
    (out / "stages.csv").write_text(summaries_csv(stages))

    outcome = RunOutcome(run_id, out, result, reports)
    (out / "summary.txt").write_text(_summary(config, outcome, stages))
    try:
        for key in store.keys():
            store.delete(key)
        (out / "store").rmdir()
    except OSError:
        pass
    return outcome


def _summary(config: RunConfig, outcome: RunOutcome, stages) -> str:
    res = outcome.cluster
    lines = [
        f"run_id: {outcome.run_id}",
        f"status: {'ok' if res.ok else 'aborted'}",
        f"peers: {config.peer.P}  mode: {config.peer.mode}  encoding: {config.peer.encoding}"
        f"  executor: {config.peer.executor.mode}",
        f"wall_time_s: {res.wall_time_s:.3f}",
        f"final_model_checksum: {outcome.final_digest()}",
        "",
        "rank  epochs  stop_reason        val_loss    val_acc   cost_per_peer_usd",
    ]
    for rank, (p, rep) in enumerate(zip(res.peers, outcome.cost_reports)):
        last = p.traces[-1] if p.traces else None
        lines.append(
            f"{rank:>4}  {len(p.traces):>6}  {p.stop_reason:<17}"
            f"  {last.loss if last else float('nan'):>9.5f}  {last.accuracy if last else float('nan'):>8.4f}"
            f"  {rep.cost_per_peer_usd:.8f}"
        )
    if any(r.measured_lambda_cost_usd is not None for r in outcome.cost_reports):
        total = sum(r.measured_lambda_cost_usd or 0.0 for r in outcome.cost_reports)
        lines.append(f"per-invocation billing, all peers (sum of duration x rate): {total:.8f} USD")
    lines += ["", f"{'stage':<24}{'count':>7}{'mean_time_s':>14}{'peak_rss_MB':>14}{'cpu_proxy':>11}"]
    for s in stages:
        lines.append(
            f"{STAGE_LABELS.get(s.stage, s.stage):<24}{s.count:>7}{s.mean_time_s:>14.6f}"
            f"{s.peak_rss_bytes / 2**20:>14.1f}{s.mean_cpu_proxy:>11.3f}"
        )
    for err in res.errors:
        lines.append(f"error: {err}")
    return "\n".join(lines) + "\n"


@dataclass
class SweepRow:
    axis: str
    value: str
    compute_time: float
    comm_time: float
    cost: float
    accuracy: float
    bytes_sent: float
    bytes_received: float
    epochs: int
    ok: bool


def sweep_row(axis: str, value: str, outcome: RunOutcome) -> SweepRow:
    """Per-peer, per-epoch means over every trace of the run."""
    traces = outcome.cluster.traces
    finals = [p.traces[-1].accuracy for p in outcome.cluster.peers if p.traces]
    return SweepRow(
        axis, value,
        float(np.mean([t.compute_s for t in traces])),
        float(np.mean([t.send_s + t.receive_s for t in traces])),
        float(np.mean([r.cost_per_peer_usd for r in outcome.cost_reports])),
        float(np.mean(finals)) if finals else float("nan"),
        float(np.mean([t.bytes_sent for t in traces])),
        float(np.mean([t.bytes_received for t in traces])),
        max(t.epoch for t in traces) if traces else 0,
        outcome.ok,
    )


def loss_curve_csv(outcome: RunOutcome) -> str:
    by_epoch: dict[int, list] = {}
    for t in outcome.cluster.traces:
        by_epoch.setdefault(t.epoch, []).append(t)
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["epoch", "mean_loss", "mean_accuracy", "peers_reporting"])
    for e in sorted(by_epoch):
        ts = by_epoch[e]
        w.writerow([e, repr(float(np.mean([t.loss for t in ts]))), repr(float(np.mean([t.accuracy for t in ts]))), len(ts)])
    return out.getvalue()


def run_sweep(config: RunConfig, axis: str, values, out_dir) -> list[tuple[SweepRow, RunOutcome]]:
    """One run per value; writes ``sweep.csv`` and, per value, a loss curve."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(AXES)}", ["--axis"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = [(str(v), config.override(AXES[axis], v)) for v in values]
    results = []
    for value, cfg in configs:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in value)
        outcome = run_experiment(cfg, out / f"{axis}={safe}")
        (out / f"loss_curve_{axis}={safe}.csv").write_text(loss_curve_csv(outcome))
        row = sweep_row(axis, value, outcome)
        log.info("sweep %s=%s: %s", axis, value, row)
        results.append((row, outcome))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(SWEEP_COLUMNS)
    for row, _ in results:
        w.writerow([row.axis, row.value, f"{row.compute_time:.6f}", f"{row.comm_time:.6f}", f"{row.cost:.10f}",
                    f"{row.accuracy:.6f}", f"{row.bytes_sent:.1f}", f"{row.bytes_received:.1f}", row.epochs,
                    int(row.ok)])
    (out / "sweep.csv").write_text(buf.getvalue())
    return results
