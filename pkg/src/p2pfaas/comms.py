"""Gradient exchange: single-slot persistent queues, epoch barrier, QSGD codec.

Wire format of a queue message (little-endian)::

    u32 sender_rank | u32 epoch | u8 encoding | u8 payload_kind | u64 length | payload

``encoding`` is 0 for raw float64 and 1 for QSGD; ``payload_kind`` is 0 for
inline bytes and 1 for a 36-character UUID naming a blob in the object store.
A raw payload is the vector as ``<f8``.  A QSGD payload is
``f64 norm | u32 s | u64 length | sign bits | level bits``, signs packed one
bit per coordinate and levels packed at ``ceil(log2(s + 1))`` bits each, both
least-significant bit first.
"""
from __future__ import annotations

import math
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .core import GradientVector
from .dataset import ObjectStore
from .errors import BrokerTimeout, CodecError, DecodeError, NumericError, ProtocolError

DEFAULT_LIMIT = 100 * 2**20
DEFAULT_TIMEOUT_S = 60.0

RAW, QSGD = 0, 1
INLINE, REFERENCE = 0, 1
HEADER = struct.Struct("<IIBBQ")
_QHEAD = struct.Struct("<dIQ")


@dataclass(frozen=True)
class Encoding:
    kind: str = "raw-f64"
    s: int = 0

    def __post_init__(self):
        if self.kind not in ("raw-f64", "qsgd"):
            raise CodecError(f"unknown encoding {self.kind!r}")
        if self.kind == "qsgd" and self.s < 1:
            raise CodecError(f"qsgd needs s >= 1, got {self.s}")

    @classmethod
    def parse(cls, text) -> "Encoding":
        if isinstance(text, Encoding):
            return text
        t = str(text).strip().lower()
        if t in ("raw", "raw-f64"):
            return cls()
        for prefix in ("qsgd:", "qsgd(", "qsgd"):
            if t.startswith(prefix):
                try:
                    return cls("qsgd", int(t[len(prefix) :].rstrip(")")))
                except ValueError:
                    break
        raise CodecError(f"cannot parse encoding {text!r}")

    def __str__(self):
        return "raw" if self.kind == "raw-f64" else f"qsgd:{self.s}"


# --------------------------------------------------------------------- QSGD


@dataclass(frozen=True, eq=False)
class QuantizedGradient:
    norm: float
    signs: np.ndarray
    levels: np.ndarray
    s: int
    length: int

    def __post_init__(self):
        if not (self.signs.size == self.levels.size == self.length):
            raise DecodeError("signs, levels and length disagree")


def level_bits(s: int) -> int:
    return max(1, math.ceil(math.log2(s + 1)))


def qsgd_encode(grad, s: int, seed=None) -> QuantizedGradient:
    """Stochastically round each |v_i|/||v|| * s to a neighbouring integer level."""
    if s < 1:
        raise CodecError(f"s must be >= 1, got {s}")
    v = np.asarray(getattr(grad, "values", grad), dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("cannot quantize a non-finite vector")
    norm = float(np.linalg.norm(v))
    signs = v < 0
    if norm == 0.0:
        return QuantizedGradient(0.0, signs, np.zeros(v.size, np.int64), s, v.size)
    u = np.abs(v) / norm * s
    floor = np.floor(u)
    rng = np.random.default_rng(seed)
    levels = floor + (rng.random(v.size) < (u - floor))
    return QuantizedGradient(norm, signs, levels.astype(np.int64), s, v.size)


def qsgd_decode(q: QuantizedGradient, source_version: int = 0, batch_count: int = 1) -> GradientVector:
    if q.levels.size and (q.levels.max() > q.s or q.levels.min() < 0):
        raise DecodeError(f"level outside [0, {q.s}]")
    sign = np.where(q.signs, -1.0, 1.0)
    return GradientVector(q.norm * sign * q.levels / q.s, source_version, batch_count)


def pack_qsgd(q: QuantizedGradient) -> bytes:
    w = level_bits(q.s)
    sign_bits = np.packbits(q.signs.astype(np.uint8), bitorder="little")
    lv = q.levels.astype(np.uint64)
    bits = ((lv[:, None] >> np.arange(w, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    level_bytes = np.packbits(bits.ravel(), bitorder="little")
    return _QHEAD.pack(q.norm, q.s, q.length) + sign_bits.tobytes() + level_bytes.tobytes()


def unpack_qsgd(blob: bytes) -> QuantizedGradient:
    try:
        norm, s, n = _QHEAD.unpack_from(blob)
    except struct.error as e:
        raise DecodeError(f"short qsgd payload: {e}") from e
    if s < 1:
        raise DecodeError("qsgd payload has s = 0")
    w = level_bits(s)
    n_sign = (n + 7) // 8
    n_level = (n * w + 7) // 8
    if len(blob) != _QHEAD.size + n_sign + n_level:
        raise DecodeError(f"qsgd payload is {len(blob)} bytes, expected {_QHEAD.size + n_sign + n_level}")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=_QHEAD.size)
    signs = np.unpackbits(raw[:n_sign], count=n, bitorder="little").astype(bool)
    bits = np.unpackbits(raw[n_sign:], count=n * w, bitorder="little").reshape(n, w)
    levels = bits.astype(np.int64) @ (1 << np.arange(w, dtype=np.int64))
    return QuantizedGradient(norm, signs, levels, s, n)


# ------------------------------------------------------------------ messages


@dataclass(frozen=True)
class GradientMessage:
    sender_rank: int
    epoch: int
    encoding: int
    payload_kind: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return HEADER.pack(self.sender_rank, self.epoch, self.encoding, self.payload_kind, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GradientMessage":
        try:
            rank, epoch, enc, kind, n = HEADER.unpack_from(blob)
        except struct.error as e:
            raise CodecError(f"short message: {e}") from e
        payload = bytes(blob[HEADER.size :])
        if len(payload) != n or enc not in (RAW, QSGD) or kind not in (INLINE, REFERENCE):
            raise CodecError("malformed message header")
        return cls(rank, epoch, enc, kind, payload)


def encode_payload(grad: GradientVector, encoding: Encoding, seed=None) -> tuple[int, bytes]:
    if encoding.kind == "raw-f64":
        return RAW, grad.values.astype("<f8").tobytes()
    return QSGD, pack_qsgd(qsgd_encode(grad, encoding.s, seed))


def decode_payload(enc: int, payload: bytes, version: int = 0) -> GradientVector:
    if enc == RAW:
        if len(payload) % 8:
            raise CodecError(f"raw payload of {len(payload)} bytes is not a float64 array")
        return GradientVector(np.frombuffer(payload, dtype="<f8"), version)
    try:
        return qsgd_decode(unpack_qsgd(payload), version)
    except DecodeError as e:
        raise CodecError(str(e)) from e


class Broker:
    """In-process stand-in for the per-peer queues and the barrier queue.

    ``link_bandwidth_bytes_per_s`` optionally delays every send and receive by
    ``bytes / bandwidth`` so that payload size shows up in communication time.
    """

    def __init__(
        self,
        store: ObjectStore | None = None,
        message_size_limit_bytes: int = DEFAULT_LIMIT,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        link_bandwidth_bytes_per_s: float | None = None,
        seed: int = 0,
    ):
        self.store = store if store is not None else ObjectStore()
        self.message_size_limit_bytes = message_size_limit_bytes
        self.timeout_s = timeout_s
        self.link_bandwidth_bytes_per_s = link_bandwidth_bytes_per_s
        self.seed = seed
        self._cv = threading.Condition()
        self._queues: dict[int, bytes] = {}
        self._barriers: dict[int, set[int]] = {}
        self._released: set[int] = set()
        self._retired: set[int] = set()
        self._sent: dict[int, int] = {}
        self._received: dict[int, int] = {}
        self.events: list[tuple[float, str, int, int]] = []

    # -- bookkeeping
    def log_event(self, kind: str, rank: int, epoch: int) -> None:
        with self._cv:
            self.events.append((time.perf_counter(), kind, rank, epoch))

    def traffic(self, rank: int) -> tuple[int, int]:
        with self._cv:
            return self._sent.get(rank, 0), self._received.get(rank, 0)

    def queue_size(self, rank: int) -> int:
        with self._cv:
            return int(rank in self._queues)

    def peek(self, rank: int) -> GradientMessage | None:
        with self._cv:
            blob = self._queues.get(rank)
        return None if blob is None else GradientMessage.from_bytes(blob)

    def _transfer_delay(self, nbytes: int) -> None:
        if self.link_bandwidth_bytes_per_s:
            time.sleep(nbytes / self.link_bandwidth_bytes_per_s)

    def _wait(self, predicate, deadline, what):
        while not predicate():
            left = deadline - time.monotonic()
            if left <= 0:
                raise BrokerTimeout(what())
            self._cv.wait(left)

    # -- queues
    def publish_gradient(self, rank: int, epoch: int, grad: GradientVector, encoding="raw") -> int:
        """Replace ``rank``'s queued message; returns bytes put on the wire."""
        encoding = Encoding.parse(encoding)
        seed = (self.seed, rank, epoch)
        try:
            enc, payload = encode_payload(grad, encoding, seed)
        except (NumericError, ValueError) as e:
            raise CodecError(f"encoding failed: {e}") from e
        msg = GradientMessage(rank, epoch, enc, INLINE, payload)
        nbytes = HEADER.size + len(payload)
        if nbytes > self.message_size_limit_bytes:
            key = self.store.put(payload)
            msg = GradientMessage(rank, epoch, enc, REFERENCE, key.encode("ascii"))
            nbytes = HEADER.size + len(payload) + len(msg.payload)
        blob = msg.to_bytes()
        self._transfer_delay(nbytes)
        with self._cv:
            if rank in self._retired:
                raise ProtocolError(f"rank {rank} already retired")
            self._queues[rank] = blob
            self._sent[rank] = self._sent.get(rank, 0) + nbytes
            self.events.append((time.perf_counter(), "publish", rank, epoch))
            self._cv.notify_all()
        return nbytes

    def consume_gradient(self, reader_rank: int, target_rank: int, min_epoch=None, timeout=None) -> GradientVector:
        """Read ``target_rank``'s message without removing it.

        With ``min_epoch`` the call blocks until the queued epoch reaches it
        (or the target retires); without it, any message will do.
        """
        if reader_rank == target_rank:
            raise ProtocolError("a peer does not consume its own queue")
        timeout = self.timeout_s if timeout is None else timeout
        deadline = time.monotonic() + timeout

        def ready():
            blob = self._queues.get(target_rank)
            if blob is None:
                if target_rank in self._retired:
                    raise ProtocolError(f"rank {target_rank} retired without publishing")
                return False
            if min_epoch is None or target_rank in self._retired:
                return True
            return HEADER.unpack_from(blob)[1] >= min_epoch

        with self._cv:
            self._wait(
                ready,
                deadline,
                lambda: f"timed out after {timeout}s waiting for rank {target_rank}"
                + ("" if min_epoch is None else f" epoch >= {min_epoch}"),
            )
            blob = self._queues[target_rank]
        msg = GradientMessage.from_bytes(blob)
        nbytes = len(blob)
        payload = msg.payload
        if msg.payload_kind == REFERENCE:
            payload = self.store.get(payload.decode("ascii"))
            nbytes += len(payload)
        self._transfer_delay(nbytes)
        with self._cv:
            self._received[reader_rank] = self._received.get(reader_rank, 0) + nbytes
        return decode_payload(msg.encoding, payload, msg.epoch)

    def retire(self, rank: int) -> None:
        """Mark ``rank`` as finished: its last message stays readable and
        satisfies every epoch wait, and barriers stop waiting for it."""
        with self._cv:
            self._retired.add(rank)
            self.events.append((time.perf_counter(), "retire", rank, -1))
            self._cv.notify_all()

    # -- barrier
    def barrier_arrive_and_wait(self, rank: int, epoch: int, P: int, timeout=None) -> None:
        if not 0 <= rank < P:
            raise ProtocolError(f"rank {rank} outside [0, {P})")
        timeout = self.timeout_s if timeout is None else timeout
        deadline = time.monotonic() + timeout
        with self._cv:
            arrived = self._barriers.setdefault(epoch, set())
            if rank in arrived or epoch in self._released:
                raise ProtocolError(f"rank {rank} arrived twice at barrier {epoch}")
            arrived.add(rank)
            self.events.append((time.perf_counter(), "arrive", rank, epoch))

            def missing():
                return sorted(set(range(P)) - arrived - self._retired)

            if not missing():
                self._released.add(epoch)
                self.events.append((time.perf_counter(), "release", rank, epoch))
                for old in [e for e in self._barriers if e < epoch - 1]:
                    del self._barriers[old]
                self._cv.notify_all()
                return
            self._wait(
                lambda: epoch in self._released or not missing(),
                deadline,
                lambda: f"barrier {epoch} timed out; missing ranks {missing()}",
            )
            if epoch not in self._released:
                self._released.add(epoch)
                self.events.append((time.perf_counter(), "release", rank, epoch))
                self._cv.notify_all()


def publish_gradient(broker: Broker, rank, epoch, grad, encoding="raw") -> int:
    return broker.publish_gradient(rank, epoch, grad, encoding)


def consume_gradient(broker: Broker, reader_rank, target_rank, min_epoch=None, timeout=None) -> GradientVector:
    return broker.consume_gradient(reader_rank, target_rank, min_epoch, timeout)


def barrier_arrive_and_wait(broker: Broker, rank, epoch, P, timeout=None) -> None:
    broker.barrier_arrive_and_wait(rank, epoch, P, timeout)
