"""Per-peer training loop and the in-process cluster that runs P peers at once.

Each epoch a peer computes its partition's batch gradients through its
executor, publishes their mean to its own queue, reads every other peer's
queue, averages all P gradients, and takes one descent step.  In synchronous
mode the reads wait for the current epoch and a barrier keeps peers in
lockstep; in asynchronous mode whatever each queue currently holds is used.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .comms import Broker, Encoding
from .core import (
    Arch,
    GradientVector,
    ModelParams,
    apply_update,
    average_batch_gradients,
    evaluate,
    init_model,
)
from .costs import MetricsRecorder
from .dataset import Dataset, ObjectStore, peer_partition, store_batches
from .errors import ConfigError, PeerAbort, ProtocolError
from .executor import Executor, ExecutorConfig, build_fanout_plan, total_lambda_cost

log = logging.getLogger(__name__)

SYNC, ASYNC = "synchronous", "asynchronous"


@dataclass(frozen=True)
class ConvergencePolicy:
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_lr: float = 1e-4

    def __post_init__(self):
        bad = []
        if self.early_stop_patience < 1:
            bad.append("convergence.early_stop_patience")
        if self.plateau_patience < 1:
            bad.append("convergence.plateau_patience")
        if self.min_delta < 0:
            bad.append("convergence.min_delta")
        if not 0 < self.plateau_factor < 1:
            bad.append("convergence.plateau_factor")
        if not self.min_lr > 0:
            bad.append("convergence.min_lr")
        if bad:
            raise ConfigError(f"invalid convergence policy: {', '.join(bad)}", bad)


CONTINUE, STOP = "continue", "stop"


def check_convergence(policy: ConvergencePolicy, history, lr: float) -> tuple[str, float]:
    """Early stopping plus plateau LR reduction, replayed over the loss history.

    A loss counts as an improvement when it beats the best so far by more than
    ``min_delta``; an improvement resets both counters.  The LR is reduced only
    when the plateau counter fires on the latest entry.
    """
    history = list(history)
    if not history:
        raise ValueError("empty loss history")
    best = math.inf
    bad = plateau_bad = 0
    fired = False
    for i, value in enumerate(history):
        fired = False
        if value < best - policy.min_delta:
            best, bad, plateau_bad = value, 0, 0
        else:
            bad += 1
            plateau_bad += 1
            if plateau_bad >= policy.plateau_patience:
                plateau_bad = 0
                fired = i == len(history) - 1
    new_lr = max(lr * policy.plateau_factor, policy.min_lr) if fired else lr
    return (STOP if bad >= policy.early_stop_patience else CONTINUE), new_lr


def average_peer_gradients(gp: dict, P: int) -> GradientVector:
    missing = sorted(set(range(P)) - set(gp))
    extra = sorted(set(gp) - set(range(P)))
    if missing or extra:
        raise ProtocolError(f"incomplete peer gradients: missing ranks {missing}, unexpected {extra}")
    stacked = np.stack([gp[r].values for r in range(P)])
    return GradientVector(
        stacked.mean(axis=0),
        max(g.source_version for g in gp.values()),
        sum(g.batch_count for g in gp.values()),
    )


@dataclass(frozen=True)
class PeerConfig:
    rank: int
    P: int
    E: int
    B: int
    lr: float
    arch: Arch
    mode: str = SYNC
    encoding: Encoding = field(default_factory=Encoding)
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    convergence: ConvergencePolicy = field(default_factory=ConvergencePolicy)
    seed: int = 0
    timeout_s: float = 60.0

    def __post_init__(self):
        bad = []
        if self.P < 1:
            bad.append("peers")
        if not 0 <= self.rank < max(self.P, 1):
            bad.append("rank")
        if self.E < 1:
            bad.append("epochs")
        if self.B < 1:
            bad.append("batch_size")
        if not self.lr > 0:
            bad.append("lr")
        if self.mode not in (SYNC, ASYNC):
            bad.append("mode")
        if bad:
            raise ConfigError(f"invalid peer config: {', '.join(bad)}", bad)


@dataclass
class EpochTrace:
    rank: int
    epoch: int
    compute_s: float
    send_s: float
    receive_s: float
    update_s: float
    convergence_s: float
    loss: float
    accuracy: float
    lr: float
    bytes_sent: int
    bytes_received: int
    stop_reason: str = ""
    num_batches: int = 0
    compute_wall_s: float = 0.0
    lambda_cost_usd: float = 0.0
    model_digest: str = ""

    @property
    def stage_times(self) -> dict[str, float]:
        return {
            "compute": self.compute_s,
            "send": self.send_s,
            "receive": self.receive_s,
            "update": self.update_s,
            "convergence": self.convergence_s,
        }


TRACE_COLUMNS = [
    "run_id", "rank", "epoch", "compute_s", "send_s", "receive_s", "update_s", "convergence_s",
    "loss", "accuracy", "lr", "bytes_sent", "bytes_received", "stop_reason",
    "num_batches", "compute_wall_s", "lambda_cost_usd", "model_digest",
]


def traces_csv(traces, run_id: str, header: bool = True) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    if header:
        w.writerow(TRACE_COLUMNS)
    for t in traces:
        w.writerow([
            run_id, t.rank, t.epoch,
            *(f"{v:.6f}" for v in t.stage_times.values()),
            repr(t.loss), repr(t.accuracy), repr(t.lr), t.bytes_sent, t.bytes_received, t.stop_reason,
            t.num_batches, f"{t.compute_wall_s:.6f}", f"{t.lambda_cost_usd:.10f}", t.model_digest,
        ])
    return out.getvalue()


@dataclass
class PeerResult:
    model: ModelParams
    traces: list[EpochTrace]
    stop_reason: str
    recorder: MetricsRecorder | None = None
    records: list = field(default_factory=list)


def run_peer(
    config: PeerConfig,
    data: Dataset,
    broker: Broker,
    store: ObjectStore,
    partition_source=None,
    recorder: MetricsRecorder | None = None,
) -> PeerResult:
    """Train one peer to convergence or ``config.E`` epochs.

    ``partition_source(rank, epoch)`` returns this peer's Partition; the default
    deals the training set round-robin after a per-epoch seeded shuffle.
    """
    cfg = config
    rank, P = cfg.rank, cfg.P
    if partition_source is None:
        def partition_source(r, epoch):
            return peer_partition(data, r, P, cfg.B, epoch, cfg.seed)

    validation = data.validation()
    recorder = recorder if recorder is not None else MetricsRecorder()
    executor = Executor(cfg.executor, store)
    model = init_model(cfg.arch, cfg.seed)
    lr = cfg.lr
    history: list[float] = []
    traces: list[EpochTrace] = []
    all_records = []
    hyper = {"lr": lr, "loss": "cross-entropy", "optimizer": "sgd"}
    stop_reason = "max_epochs"
    stage = "setup"
    epoch = 0
    try:
        for epoch in range(1, cfg.E + 1):
            broker.log_event("epoch_start", rank, epoch)
            times = {}

            stage = "compute"
            recorder.begin(stage)
            t0 = time.perf_counter()
            busy0 = executor.busy_s
            part = partition_source(rank, epoch)
            manifest = store_batches(store, part)
            model_key = store.put(model.to_bytes())
            try:
                plan = build_fanout_plan(manifest, model_key, {**hyper, "lr": lr})
                grads, records, wall = executor.execute(plan)
            finally:
                for _, k in manifest:
                    store.delete(k)
                store.delete(model_key)
            own = average_batch_gradients(grads)
            all_records.extend(records)
            recorder.add_busy(executor.busy_s - busy0)
            times["compute"] = time.perf_counter() - t0
            recorder.end(stage)

            stage = "send"
            sent0, recv0 = broker.traffic(rank)
            with recorder.stage(stage):
                t0 = time.perf_counter()
                broker.publish_gradient(rank, epoch, own, cfg.encoding)
                times["send"] = time.perf_counter() - t0

            stage = "receive"
            with recorder.stage(stage):
                t0 = time.perf_counter()
                gp = {rank: own}
                min_epoch = epoch if cfg.mode == SYNC else None
                for i in range(P):
                    if i != rank:
                        gp[i] = broker.consume_gradient(rank, i, min_epoch, cfg.timeout_s)
                if cfg.mode == SYNC:
                    broker.barrier_arrive_and_wait(rank, epoch, P, cfg.timeout_s)
                times["receive"] = time.perf_counter() - t0

            stage = "update"
            with recorder.stage(stage):
                t0 = time.perf_counter()
                avg = average_peer_gradients(gp, P)
                step = GradientVector(avg.values, model.version, avg.batch_count)
                model = apply_update(model, step, lr)
                times["update"] = time.perf_counter() - t0

            stage = "convergence"
            with recorder.stage(stage):
                t0 = time.perf_counter()
                ev = evaluate(model, validation)
                history.append(ev.loss.value)
                lr_used = lr
                decision, lr = check_convergence(cfg.convergence, history, lr)
                times["convergence"] = time.perf_counter() - t0

            sent1, recv1 = broker.traffic(rank)
            trace = EpochTrace(
                rank, epoch, times["compute"], times["send"], times["receive"], times["update"],
                times["convergence"], ev.loss.value, ev.accuracy, lr_used,
                sent1 - sent0, recv1 - recv0, "",
                len(manifest), wall, total_lambda_cost(records), model.digest(),
            )
            traces.append(trace)
            log.debug("rank %d epoch %d loss %.5f acc %.4f", rank, epoch, ev.loss.value, ev.accuracy)
            if decision == "stop":
                stop_reason = "converged"
                break
        if traces:
            traces[-1].stop_reason = stop_reason
    except Exception as e:
        recorder.abandon()
        broker.retire(rank)
        raise PeerAbort(rank, epoch, stage, e, traces) from e
    finally:
        recorder.stop_polling()
    broker.retire(rank)
    return PeerResult(model, traces, stop_reason, recorder, all_records)


@dataclass
class ClusterResult:
    peers: list[PeerResult]
    broker: Broker
    wall_time_s: float
    errors: list[PeerAbort] = field(default_factory=list)

    @property
    def traces(self) -> list[EpochTrace]:
        return sorted((t for p in self.peers if p for t in p.traces), key=lambda t: (t.epoch, t.rank))

    @property
    def ok(self) -> bool:
        return not self.errors


def run_cluster(
    base: PeerConfig,
    data: Dataset,
    store: ObjectStore | None = None,
    broker: Broker | None = None,
    partition_source=None,
) -> ClusterResult:
    """Run ranks ``0..P-1`` of ``base`` concurrently, one thread per peer."""
    store = store if store is not None else ObjectStore()
    broker = broker if broker is not None else Broker(store, timeout_s=base.timeout_s, seed=base.seed)
    results: list[PeerResult | None] = [None] * base.P
    errors: list[PeerAbort] = []
    lock = threading.Lock()

    def target(r):
        try:
            results[r] = run_peer(replace(base, rank=r), data, broker, store, partition_source)
        except PeerAbort as e:
            log.error("%s", e)
            with lock:
                errors.append(e)
                results[r] = PeerResult(None, e.traces, f"aborted:{e.stage}")

    t0 = time.perf_counter()
    threads = [threading.Thread(target=target, args=(r,), name=f"peer-{r}") for r in range(base.P)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return ClusterResult(results, broker, time.perf_counter() - t0, sorted(errors, key=lambda e: e.rank))
