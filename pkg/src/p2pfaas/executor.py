"""Per-batch gradient executors: a sequential instance and a simulated FaaS pool.

The serverless executor mirrors a dynamically generated fan-out state machine:
one branch per stored batch, each branch reads the model and its batch from
the object store, computes the gradient, and writes it back under a fresh key.

Simulated compute time is deterministic.  A branch is charged
``simulated_speed_factor * 6 * rows * param_count / REFERENCE_FLOPS`` seconds
(forward plus backward pass at a nominal throughput); whatever part of that the
real kernel did not use is slept, so concurrent branches overlap in wall time
even on a single core.
"""
from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from .core import GradientVector, ModelParams, compute_batch_gradient
from .dataset import ObjectStore, load_batch
from .errors import ConfigError, ExecutionError, PlanError, PreconditionError

INSTANCE = "instance-sequential"
SERVERLESS = "serverless-parallel"
REFERENCE_FLOPS = 1e9


@dataclass(frozen=True)
class ExecutorConfig:
    mode: str = SERVERLESS
    max_concurrency: int = 16
    invocation_overhead_ms: float = 50.0
    lambda_memory_mb: int = 4400
    lambda_rate_usd_per_s: float = 0.0000573
    instance_rate_usd_per_s: float = 0.00000639
    simulated_speed_factor: float = 1.0
    retries: int = 0

    def __post_init__(self):
        bad = []
        if self.mode not in (INSTANCE, SERVERLESS):
            bad.append("executor.mode")
        if self.max_concurrency < 1:
            bad.append("executor.max_concurrency")
        if self.invocation_overhead_ms < 0:
            bad.append("executor.overhead_ms")
        if self.lambda_rate_usd_per_s < 0:
            bad.append("executor.lambda_rate")
        if self.instance_rate_usd_per_s < 0:
            bad.append("executor.instance_rate")
        if not self.simulated_speed_factor > 0:
            bad.append("executor.speed_factor")
        if self.retries < 0:
            bad.append("executor.retries")
        if bad:
            raise ConfigError(f"invalid executor config: {', '.join(bad)}", bad)

    @property
    def concurrency(self) -> int:
        return 1 if self.mode == INSTANCE else self.max_concurrency


def simulated_compute_seconds(rows: int, param_count: int, speed_factor: float) -> float:
    return speed_factor * 6.0 * rows * param_count / REFERENCE_FLOPS


def speed_factor_for(target_s: float, rows: int, param_count: int) -> float:
    """Speed factor that makes one batch of ``rows`` cost ``target_s`` seconds."""
    return target_s / simulated_compute_seconds(rows, param_count, 1.0)


@dataclass(frozen=True)
class InvocationRecord:
    batch_id: int
    start: float
    duration_s: float
    memory_mb: int
    billed_cost_usd: float
    outcome: str = "ok"
    attempts: int = 1

    @property
    def ok(self) -> bool:
        return self.outcome == "ok"


@dataclass(frozen=True)
class FanoutPlan:
    batch_keys: tuple[tuple[int, str], ...]
    model_ref: str
    hyper: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.batch_keys)

    def to_json(self) -> str:
        """One branch object per batch, in the shape a cloud state machine would take."""
        return json.dumps(
            {
                "num_batches": len(self.batch_keys),
                "model_ref": self.model_ref,
                "hyper": self.hyper,
                "branches": [
                    {"batch_id": b, "batch_key": k, "model_ref": self.model_ref, **self.hyper}
                    for b, k in self.batch_keys
                ],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FanoutPlan":
        doc = json.loads(text)
        manifest = [(br["batch_id"], br["batch_key"]) for br in doc["branches"]]
        return build_fanout_plan(manifest, doc["model_ref"], doc.get("hyper", {}))


def build_fanout_plan(manifest, model_key: str, hyper=None) -> FanoutPlan:
    manifest = [(int(b), str(k)) for b, k in manifest]
    if not manifest:
        raise PlanError("empty manifest")
    ids = [b for b, _ in manifest]
    dupes = sorted({b for b in ids if ids.count(b) > 1})
    if dupes:
        raise PlanError(f"duplicate batch_ids {dupes}")
    if sorted(ids) != list(range(len(ids))):
        raise PlanError(f"batch_ids must be dense 0..{len(ids) - 1}, got {sorted(ids)}")
    hyper = dict(hyper or {"lr": None, "loss": "cross-entropy", "optimizer": "sgd"})
    return FanoutPlan(tuple(sorted(manifest)), model_key, hyper)


class Executor:
    """Runs fan-out plans for one peer.  ``kernel`` is injectable for fault tests."""

    def __init__(self, config: ExecutorConfig, store: ObjectStore, kernel=compute_batch_gradient):
        self.config = config
        self.store = store
        self.kernel = kernel
        self._lock = threading.Lock()
        self._in_flight = 0
        self.peak_in_flight = 0
        self.busy_s = 0.0

    def _enter(self):
        with self._lock:
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)

    def _leave(self, busy):
        with self._lock:
            self._in_flight -= 1
            self.busy_s += busy

    def _branch(self, plan: FanoutPlan, batch_id: int, key: str):
        cfg = self.config
        serverless = cfg.mode == SERVERLESS
        self._enter()
        start = time.perf_counter()
        cpu0 = time.thread_time()
        try:
            if serverless and cfg.invocation_overhead_ms:
                time.sleep(cfg.invocation_overhead_ms / 1000.0)
            model = ModelParams.from_bytes(self.store.get(plan.model_ref))
            batch = load_batch(self.store, key)
            t0 = time.perf_counter()
            grad = self.kernel(model, batch)
            target = simulated_compute_seconds(
                len(batch), model.arch.param_count, cfg.simulated_speed_factor
            )
            remaining = target - (time.perf_counter() - t0)
            if remaining > 0:
                time.sleep(remaining)
            grad_key = self.store.put(grad.to_bytes())
        finally:
            self._leave(time.thread_time() - cpu0)
        duration = time.perf_counter() - start
        cost = duration * cfg.lambda_rate_usd_per_s if serverless else 0.0
        return grad_key, InvocationRecord(batch_id, start, duration, cfg.lambda_memory_mb, cost)

    def _attempt(self, plan, batch_id, key):
        last = None
        for attempt in range(1, self.config.retries + 2):
            try:
                grad_key, rec = self._branch(plan, batch_id, key)
                if attempt > 1:
                    rec = InvocationRecord(**{**asdict(rec), "attempts": attempt})
                return grad_key, rec
            except Exception as e:  # noqa: BLE001 - every branch failure is reported
                last = e
        raise last

    def execute(self, plan: FanoutPlan):
        """Run every branch; returns ``(grads, records, wall_time_s)`` ordered by batch_id."""
        if len(plan) == 0:
            raise PreconditionError("empty plan")
        results, failed = {}, {}
        wall0 = time.perf_counter()
        if self.config.concurrency == 1:
            for b, k in plan.batch_keys:
                try:
                    results[b] = self._attempt(plan, b, k)
                except Exception as e:  # noqa: BLE001
                    failed[b] = e
        else:
            workers = min(self.config.concurrency, len(plan))
            with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="faas") as pool:
                futures = {b: pool.submit(self._attempt, plan, b, k) for b, k in plan.batch_keys}
                for b, fut in futures.items():
                    try:
                        results[b] = fut.result()
                    except Exception as e:  # noqa: BLE001
                        failed[b] = e
        wall = time.perf_counter() - wall0
        if failed:
            for grad_key, _ in results.values():
                self.store.delete(grad_key)
            raise ExecutionError(failed)
        grads, records = [], []
        for b in sorted(results):
            grad_key, rec = results[b]
            grads.append(GradientVector.from_bytes(self.store.get(grad_key)))
            self.store.delete(grad_key)
            records.append(rec)
        return grads, records, wall


def execute(plan: FanoutPlan, config: ExecutorConfig, store: ObjectStore):
    return Executor(config, store).execute(plan)


def total_lambda_cost(records) -> float:
    return sum(r.billed_cost_usd for r in records)
