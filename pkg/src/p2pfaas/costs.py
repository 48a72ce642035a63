"""Per-peer cost model for serverless vs. instance gradient computation, plus the
stage-level time/memory/CPU recorder."""
from __future__ import annotations

import csv
import io
import json
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources

import psutil

from .errors import InstrumentationError, PreconditionError

STAGES = ("compute", "send", "receive", "update", "convergence")
STAGE_LABELS = {
    "compute": "Compute Gradients",
    "send": "Send Gradients",
    "receive": "Receive Gradients",
    "update": "Model Update",
    "convergence": "Convergence detection",
}


@dataclass(frozen=True)
class CostInputs:
    num_batches: int
    lambda_rate_usd_per_s: float
    ec2_rate_usd_per_s: float
    computation_time_s: float
    lambda_memory_mb: int = 0
    batch_size: int = 0

    def __post_init__(self):
        for name in ("num_batches", "lambda_rate_usd_per_s", "ec2_rate_usd_per_s", "computation_time_s"):
            if getattr(self, name) < 0:
                raise PreconditionError(f"{name} must be non-negative")


@dataclass(frozen=True)
class CostReport:
    architecture: str
    cost_per_peer_usd: float
    inputs: CostInputs
    # Sum of per-invocation billing, when the run actually invoked functions.
    measured_lambda_cost_usd: float | None = None

    @property
    def time_s(self) -> float:
        return self.inputs.computation_time_s


def serverless_cost(inputs: CostInputs) -> float:
    """``(lambda_rate * num_batches + ec2_rate) * computation_time``.

    The per-batch function rate multiplies the whole computation time, as in
    the published tables; per-invocation billing is ``total_lambda_cost``.
    """
    if inputs.num_batches < 1:
        raise PreconditionError("serverless cost needs at least one batch")
    return (inputs.lambda_rate_usd_per_s * inputs.num_batches + inputs.ec2_rate_usd_per_s) * inputs.computation_time_s


def instance_cost(ec2_rate_usd_per_s: float, computation_time_s: float) -> float:
    if ec2_rate_usd_per_s < 0 or computation_time_s < 0:
        raise PreconditionError("rate and time must be non-negative")
    return ec2_rate_usd_per_s * computation_time_s


def serverless_report(inputs: CostInputs, measured=None) -> CostReport:
    return CostReport("serverless", serverless_cost(inputs), inputs, measured)


def instance_report(inputs: CostInputs) -> CostReport:
    return CostReport("instance", instance_cost(inputs.ec2_rate_usd_per_s, inputs.computation_time_s), inputs)


@dataclass(frozen=True)
class Comparison:
    cost_ratio: float
    time_reduction_pct: float

    def __iter__(self):
        return iter((self.cost_ratio, self.time_reduction_pct))


def compare_architectures(s: CostReport, i: CostReport) -> Comparison:
    if i.cost_per_peer_usd == 0 or i.time_s == 0:
        raise ZeroDivisionError("instance report has zero cost or time")
    return Comparison(
        s.cost_per_peer_usd / i.cost_per_peer_usd,
        100.0 * (i.time_s - s.time_s) / i.time_s,
    )


# ---------------------------------------------------------------- published tables


def load_published_tables() -> dict:
    text = resources.files("p2pfaas").joinpath("data/published_tables.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class TableCell:
    architecture: str
    batch_size: int
    computed_usd: float
    published_usd: float
    report: CostReport

    @property
    def error(self) -> float:
        return self.computed_usd - self.published_usd


def reproduce_published_tables(lambda_rate=None, ec2_rate=None, tables=None) -> list[TableCell]:
    """Recompute every cost cell of both published tables.

    ``lambda_rate``/``ec2_rate`` override the published rates (both tables'
    EC2 rates are overridden by ``ec2_rate``).
    """
    tables = tables or load_published_tables()
    cells = []
    sl = tables["serverless"]
    for col in sl["columns"]:
        inputs = CostInputs(
            col["num_batches"],
            col["lambda_rate_usd_per_s"] if lambda_rate is None else lambda_rate,
            sl["ec2_rate_usd_per_s"] if ec2_rate is None else ec2_rate,
            col["computation_time_s"],
            col["lambda_memory_mb"],
            col["batch_size"],
        )
        rep = serverless_report(inputs)
        cells.append(TableCell("serverless", col["batch_size"], rep.cost_per_peer_usd, col["published_cost_usd"], rep))
    inst = tables["instance"]
    for col in inst["columns"]:
        inputs = CostInputs(
            1, 0.0, inst["ec2_rate_usd_per_s"] if ec2_rate is None else ec2_rate,
            col["computation_time_s"], 0, col["batch_size"],
        )
        rep = instance_report(inputs)
        cells.append(TableCell("instance", col["batch_size"], rep.cost_per_peer_usd, col["published_cost_usd"], rep))
    return cells


def format_published_tables(cells: list[TableCell], tables=None) -> str:
    tables = tables or load_published_tables()
    sl = [c for c in cells if c.architecture == "serverless"]
    inst = [c for c in cells if c.architecture == "instance"]
    out = io.StringIO()

    def row(label, values):
        out.write(f"{label:<44}" + "".join(f"{v:>14}" for v in values) + "\n")

    out.write("Time and cost of compute gradients per peer, with serverless\n")
    row("Batch Size", [c.batch_size for c in sl])
    row("Number of batches", [c.report.inputs.num_batches for c in sl])
    row("Instance Type", [tables["serverless"]["instance_type"]] * len(sl))
    row("Lambda Memory size", [f"{c.report.inputs.lambda_memory_mb} MB" for c in sl])
    row("Time to Compute Gradients (seconds)", [f"{c.report.inputs.computation_time_s:g}" for c in sl])
    row("Estimated EC2 instance Cost (USD / seconds)", [f"${c.report.inputs.ec2_rate_usd_per_s:.8f}" for c in sl])
    row("Estimated Lambda Cost (USD / seconds)", [f"${c.report.inputs.lambda_rate_usd_per_s:.7f}" for c in sl])
    row("Estimated Compute Gradients Cost per Peer (USD)", [f"${c.computed_usd:.5f}" for c in sl])
    row("  published", [f"${c.published_usd:.5f}" for c in sl])
    out.write("\nTime and cost of compute gradients per peer, without serverless\n")
    row("batch size", [c.batch_size for c in inst])
    row("Instance Type", [tables["instance"]["instance_type"]] * len(inst))
    row("Time to Compute Gradients (seconds)", [f"{c.report.inputs.computation_time_s:g}" for c in inst])
    row("Estimated EC2 instance Cost (USD / seconds)", [f"${c.report.inputs.ec2_rate_usd_per_s:.8f}" for c in inst])
    row("Estimated Compute Gradients Cost per Peer (USD)", [f"${c.computed_usd:.5f}" for c in inst])
    row("  published", [f"${c.published_usd:.5f}" for c in inst])
    return out.getvalue()


def cost_rows_csv(cells: list[TableCell]) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["architecture", "batch_size", "num_batches", "lambda_rate_usd_per_s", "ec2_rate_usd_per_s",
                "computation_time_s", "cost_per_peer_usd", "published_usd", "error_usd"])
    for c in cells:
        i = c.report.inputs
        w.writerow([c.architecture, c.batch_size, i.num_batches, i.lambda_rate_usd_per_s, i.ec2_rate_usd_per_s,
                    i.computation_time_s, f"{c.computed_usd:.8f}", c.published_usd, f"{c.error:+.8f}"])
    return out.getvalue()


# ------------------------------------------------------------------ recorder


@dataclass
class StageSample:
    stage: str
    wall_s: float
    peak_rss_bytes: int
    cpu_proxy: float


@dataclass
class StageSummary:
    stage: str
    count: int
    mean_time_s: float
    peak_rss_bytes: int
    mean_cpu_proxy: float


@dataclass
class MetricsRecorder:
    """Stage timer for one peer thread.

    Resident set size is sampled at stage boundaries and every
    ``poll_interval_s`` while a stage is open.  The CPU proxy is the calling
    thread's CPU time plus any reported worker busy time, over wall time.
    """

    poll_interval_s: float = 0.1
    samples: list[StageSample] = field(default_factory=list)
    _open: list = field(default_factory=list, repr=False)
    _poller: threading.Thread | None = field(default=None, repr=False)
    _stop: threading.Event = field(default_factory=threading.Event, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @staticmethod
    def _rss() -> int:
        return psutil.Process().memory_info().rss

    def _poll(self):
        while not self._stop.wait(self.poll_interval_s):
            rss = self._rss()
            with self._lock:
                for frame in self._open:
                    frame["peak"] = max(frame["peak"], rss)

    def begin(self, stage: str, now: float | None = None) -> None:
        if self.poll_interval_s and self._poller is None:
            self._poller = threading.Thread(target=self._poll, daemon=True, name="rss-poll")
            self._poller.start()
        frame = {
            "stage": stage,
            "t0": time.perf_counter() if now is None else now,
            "cpu0": time.thread_time(),
            "peak": self._rss(),
            "busy": 0.0,
        }
        with self._lock:
            self._open.append(frame)

    def add_busy(self, seconds: float) -> None:
        with self._lock:
            if self._open:
                self._open[-1]["busy"] += seconds

    def end(self, stage: str, now: float | None = None) -> StageSample:
        with self._lock:
            if not self._open or self._open[-1]["stage"] != stage:
                top = self._open[-1]["stage"] if self._open else None
                raise InstrumentationError(f"end({stage!r}) does not match open stage {top!r}")
            frame = self._open.pop()
        t1 = time.perf_counter() if now is None else now
        wall = t1 - frame["t0"]
        if wall < 0:
            raise InstrumentationError(f"stage {stage!r} ended before it began")
        cpu = time.thread_time() - frame["cpu0"] + frame["busy"]
        sample = StageSample(stage, wall, max(frame["peak"], self._rss()), cpu / wall if wall > 0 else 0.0)
        self.samples.append(sample)
        return sample

    @contextmanager
    def stage(self, stage: str):
        self.begin(stage)
        try:
            yield
        finally:
            self.end(stage)

    def stop_polling(self) -> None:
        self._stop.set()

    def abandon(self) -> None:
        """Drop any open stages after an abort."""
        with self._lock:
            self._open.clear()
        self._stop.set()

    def close(self) -> None:
        self._stop.set()
        if self._open:
            raise InstrumentationError(f"unclosed stages {[f['stage'] for f in self._open]}")

    def summarize(self) -> list[StageSummary]:
        order = [s for s in STAGES if any(x.stage == s for x in self.samples)]
        order += sorted({x.stage for x in self.samples} - set(order))
        rows = []
        for st in order:
            xs = [x for x in self.samples if x.stage == st]
            rows.append(
                StageSummary(
                    st,
                    len(xs),
                    sum(x.wall_s for x in xs) / len(xs),
                    max(x.peak_rss_bytes for x in xs),
                    sum(x.cpu_proxy for x in xs) / len(xs),
                )
            )
        return rows


def summaries_csv(rows: list[StageSummary]) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["stage", "count", "mean_time_s", "peak_rss_bytes", "mean_cpu_proxy"])
    for r in rows:
        w.writerow([r.stage, r.count, f"{r.mean_time_s:.6f}", r.peak_rss_bytes, f"{r.mean_cpu_proxy:.4f}"])
    return out.getvalue()
