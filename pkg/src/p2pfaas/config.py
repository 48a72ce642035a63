"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; every key is optional and falls
back to the default in ``DEFAULTS``.  Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .comms import DEFAULT_LIMIT, Broker, Encoding
from .core import Arch
from .dataset import DatasetSpec, ObjectStore
from .errors import CodecError, ConfigError
from .executor import INSTANCE, SERVERLESS, ExecutorConfig
from .trainer import ASYNC, SYNC, ConvergencePolicy, PeerConfig

DEFAULTS: dict[str, str] = {
    "dataset.kind": "blobs",
    "dataset.classes": "2",
    "dataset.features": "2",
    "dataset.samples": "2000",
    "dataset.separation": "3.0",
    "dataset.path": "",
    "dataset.label_column": "label",
    "dataset.preprocessing": "standardize",
    "model": "logreg:2,2",
    "peers": "4",
    "batch_size": "64",
    "epochs": "30",
    "lr": "0.1",
    "mode": "sync",
    "encoding": "raw",
    "executor.mode": "serverless",
    "executor.max_concurrency": "16",
    "executor.overhead_ms": "50",
    "executor.lambda_memory_mb": "4400",
    "executor.lambda_rate": "0.0000573",
    "executor.instance_rate": "0.00000639",
    "executor.speed_factor": "1.0",
    "executor.retries": "0",
    "convergence.early_stop_patience": "10",
    "convergence.min_delta": "0.0001",
    "convergence.plateau_patience": "5",
    "convergence.plateau_factor": "0.5",
    "convergence.min_lr": "0.0001",
    "broker.message_limit_bytes": str(DEFAULT_LIMIT),
    "broker.bandwidth_bytes_per_s": "0",
    "timeout_s": "60",
    "seed": "0",
}

MODES = {"sync": SYNC, SYNC: SYNC, "async": ASYNC, ASYNC: ASYNC}
EXECUTOR_MODES = {"instance": INSTANCE, INSTANCE: INSTANCE, "serverless": SERVERLESS, SERVERLESS: SERVERLESS}


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'", [f"line {lineno}"])
        out[key.strip()] = value.strip()
    return out


def dump_text(values: dict[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    peer: PeerConfig
    message_limit_bytes: int
    bandwidth_bytes_per_s: float
    raw: dict

    @property
    def seed(self) -> int:
        return self.peer.seed

    def snapshot(self) -> str:
        return dump_text(self.raw)

    def make_broker(self, store: ObjectStore) -> Broker:
        return Broker(
            store,
            message_size_limit_bytes=self.message_limit_bytes,
            timeout_s=self.peer.timeout_s,
            link_bandwidth_bytes_per_s=self.bandwidth_bytes_per_s or None,
            seed=self.seed,
        )

    def with_overrides(self, **kv) -> "RunConfig":
        return build({**self.raw, **{k.replace("__", "."): str(v) for k, v in kv.items()}})

    def override(self, key: str, value) -> "RunConfig":
        return build({**self.raw, key: str(value)})


def build(values: dict[str, str]) -> RunConfig:
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)
    v = {**DEFAULTS, **values}
    bad: list[str] = []

    def get(key, conv):
        try:
            return conv(v[key])
        except (ValueError, TypeError):
            bad.append(key)
            return None

    ints = {k: get(k, int) for k in (
        "dataset.classes", "dataset.features", "dataset.samples", "peers", "batch_size", "epochs",
        "executor.max_concurrency", "executor.lambda_memory_mb", "executor.retries",
        "convergence.early_stop_patience", "convergence.plateau_patience", "broker.message_limit_bytes", "seed",
    )}
    floats = {k: get(k, float) for k in (
        "dataset.separation", "lr", "executor.overhead_ms", "executor.lambda_rate", "executor.instance_rate",
        "executor.speed_factor", "convergence.min_delta", "convergence.plateau_factor", "convergence.min_lr",
        "broker.bandwidth_bytes_per_s", "timeout_s",
    )}
    if v["mode"] not in MODES:
        bad.append("mode")
    if v["executor.mode"] not in EXECUTOR_MODES:
        bad.append("executor.mode")
    try:
        encoding = Encoding.parse(v["encoding"])
    except CodecError:
        bad.append("encoding")
    try:
        arch = Arch.parse(v["model"])
    except ConfigError:
        bad.append("model")
    if bad:
        raise ConfigError("invalid config values: " + ", ".join(sorted(set(bad))), sorted(set(bad)))

    def check(key, ok):
        if not ok:
            bad.append(key)

    check("peers", ints["peers"] >= 1)
    check("batch_size", ints["batch_size"] >= 1)
    check("epochs", ints["epochs"] >= 1)
    check("lr", floats["lr"] > 0)
    check("timeout_s", floats["timeout_s"] > 0)
    check("broker.message_limit_bytes", ints["broker.message_limit_bytes"] >= 1)
    check("broker.bandwidth_bytes_per_s", floats["broker.bandwidth_bytes_per_s"] >= 0)
    if v["dataset.kind"] == "blobs":
        check("dataset.samples", ints["dataset.samples"] >= max(ints["peers"], 1) * max(ints["batch_size"], 1))
        check("model", arch.input_dim == ints["dataset.features"] and arch.num_classes == ints["dataset.classes"])
    if bad:
        raise ConfigError("invalid config values: " + ", ".join(sorted(set(bad))), sorted(set(bad)))

    collected: list[str] = []
    try:
        dataset = DatasetSpec(
            kind=v["dataset.kind"], classes=ints["dataset.classes"], features=ints["dataset.features"],
            samples=ints["dataset.samples"], separation=floats["dataset.separation"], seed=ints["seed"],
            path=v["dataset.path"] or None, label_column=v["dataset.label_column"],
            preprocessing=v["dataset.preprocessing"],
        )
    except ConfigError as e:
        collected += e.keys
    try:
        executor = ExecutorConfig(
            mode=EXECUTOR_MODES[v["executor.mode"]], max_concurrency=ints["executor.max_concurrency"],
            invocation_overhead_ms=floats["executor.overhead_ms"],
            lambda_memory_mb=ints["executor.lambda_memory_mb"],
            lambda_rate_usd_per_s=floats["executor.lambda_rate"],
            instance_rate_usd_per_s=floats["executor.instance_rate"],
            simulated_speed_factor=floats["executor.speed_factor"], retries=ints["executor.retries"],
        )
    except ConfigError as e:
        collected += e.keys
    try:
        convergence = ConvergencePolicy(
            early_stop_patience=ints["convergence.early_stop_patience"],
            min_delta=floats["convergence.min_delta"],
            plateau_patience=ints["convergence.plateau_patience"],
            plateau_factor=floats["convergence.plateau_factor"], min_lr=floats["convergence.min_lr"],
        )
    except ConfigError as e:
        collected += e.keys
    if collected:
        raise ConfigError("invalid config values: " + ", ".join(collected), collected)

    peer = PeerConfig(
        rank=0, P=ints["peers"], E=ints["epochs"], B=ints["batch_size"], lr=floats["lr"], arch=arch,
        mode=MODES[v["mode"]], encoding=encoding, executor=executor, convergence=convergence,
        seed=ints["seed"], timeout_s=floats["timeout_s"],
    )
    return RunConfig(dataset, peer, ints["broker.message_limit_bytes"], floats["broker.bandwidth_bytes_per_s"], v)


def load(path, seed: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}", ["--config"]) from e
    values = parse_text(text)
    if seed is not None:
        values["seed"] = str(seed)
    return build(values)


def default_config(**overrides) -> RunConfig:
    return build({k.replace("__", "."): str(val) for k, val in overrides.items()})


__all__ = ["DEFAULTS", "RunConfig", "build", "default_config", "load", "parse_text"]
