"""Exception hierarchy shared across the control plane, transport and harness."""


class KvrmError(Exception):
    pass


# pager
class OutOfPages(KvrmError):
    pass


class SessionRetired(KvrmError):
    """Reserve or alias against a session that already observed EOS."""


class UnknownSession(KvrmError, KeyError):
    pass


class PrefixOutOfRange(KvrmError):
    pass


class AliasOverlap(KvrmError):
    pass


class UnmappedRange(KvrmError):
    pass


class FutureDelta(KvrmError):
    pass


# transport / device
class UnmappedBlock(KvrmError):
    pass


class ShapeViolation(KvrmError):
    pass


class MultiCommit(KvrmError):
    pass


# far view
class EmptyChunk(KvrmError):
    pass


class DimensionMismatch(KvrmError):
    pass


# workload
class InfeasibleSpec(KvrmError):
    pass


class TraceParseError(KvrmError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class NonMonotoneTime(TraceParseError):
    pass


class EmptyStream(KvrmError):
    pass


class UnknownRegime(KvrmError):
    pass


# metrics
class EmptyRun(KvrmError):
    pass


class WorkloadMismatch(KvrmError):
    pass


class InvariantViolation(KvrmError):
    """Raised by the scenario runner when an audit fails mid-run."""
