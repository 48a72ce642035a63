"""Exception hierarchy shared by every module of the package."""


class P2PError(Exception):
    """Base class for all errors raised by p2pfaas."""


class ConfigError(P2PError, ValueError):
    """Invalid architecture, dataset spec, or run configuration."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class ShapeError(P2PError, ValueError):
    pass


class NumericError(P2PError, ArithmeticError):
    pass


class PreconditionError(P2PError, ValueError):
    pass


class StalenessError(P2PError):
    """A gradient was applied to, or averaged with, a different model version."""


class IngestionError(P2PError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class StoreError(P2PError):
    pass


class NotFoundError(StoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DecodeError(P2PError, ValueError):
    pass


class PlanError(P2PError, ValueError):
    pass


class ExecutionError(P2PError):
    """One or more fan-out branches failed; no partial result is returned."""

    def __init__(self, failed):
        self.failed = dict(sorted(failed.items()))
        detail = ", ".join(f"{b}: {e!r}" for b, e in self.failed.items())
        super().__init__(f"failed batch_ids {list(self.failed)} ({detail})")


class CodecError(P2PError, ValueError):
    pass


class ProtocolError(P2PError):
    pass


class BrokerTimeout(P2PError, TimeoutError):
    pass


class InstrumentationError(P2PError):
    pass


class PeerAbort(P2PError):
    """A peer stopped training because a stage failed."""

    def __init__(self, rank, epoch, stage, cause, traces=()):
        self.rank = rank
        self.epoch = epoch
        self.stage = stage
        self.cause = cause
        self.traces = list(traces)
        super().__init__(f"peer {rank} aborted at epoch {epoch}, stage {stage}: {cause!r}")
