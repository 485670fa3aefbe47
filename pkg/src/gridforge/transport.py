"""In-process multi-rank runtime.

Each logical rank runs the same program in its own thread and talks through a
shared router: buffered point-to-point byte messages with exact
(source, destination, tag) matching and FIFO order per triple, plus
deterministic collectives (allreduce over min/max/sum, variable-length
allgather, barrier). The API mirrors a message-passing environment closely
enough that a socket- or MPI-backed implementation could replace this module
without touching mesh, AMR or exchange code.

Results are deterministic: receives name their source and tag, collective
reductions fold in rank-ascending order, and min/max are selections rather
than arithmetic. The router counts messages and collective calls so tests can
prove which communication a given phase performed. A fully blocked system
(every unfinished rank waiting on something no other rank can provide) raises
a DeadlockError on all ranks instead of hanging.
"""

import struct
import threading
from collections import deque
from dataclasses import dataclass


class TransportError(RuntimeError):
    pass


class DeadlockError(TransportError):
    """All unfinished ranks are blocked and no pending operation can complete."""


class ReceiveOverflowError(TransportError):
    """A matched message is longer than the receive's declared maximum."""


_ENVELOPE_HEADER = struct.Struct("<IIIQ")  # source, destination, tag, payload length


@dataclass(frozen=True)
class Envelope:
    source: int
    destination: int
    tag: int
    payload: bytes

    def encode(self) -> bytes:
        """Wire image: little-endian header, length-prefixed payload."""
        return _ENVELOPE_HEADER.pack(self.source, self.destination, self.tag, len(self.payload)) + self.payload


def decode_envelope(data: bytes) -> Envelope:
    source, destination, tag, length = _ENVELOPE_HEADER.unpack_from(data)
    payload = data[_ENVELOPE_HEADER.size : _ENVELOPE_HEADER.size + length]
    if len(payload) != length:
        raise TransportError(f"truncated envelope: expected {length} payload bytes")
    return Envelope(source, destination, tag, payload)


class RouterStats:
    """Counters for point-to-point traffic and collective calls."""

    def __init__(self):
        self.p2p_messages = 0
        self.p2p_bytes = 0
        self.collectives = {"allreduce": 0, "allgather": 0, "barrier": 0}

    def snapshot(self) -> dict:
        return {
            "p2p_messages": self.p2p_messages,
            "p2p_bytes": self.p2p_bytes,
            "collectives": dict(self.collectives),
        }


class SendHandle:
    """Completed at post time (sends are buffered); wait() is idempotent."""

    def wait(self):
        return None


class RecvHandle:
    def __init__(self, router, rank, source, tag, max_bytes):
        self._router = router
        self._rank = rank
        self._source = source
        self._tag = tag
        self._max_bytes = max_bytes
        self._payload = None
        self._done = False

    def wait(self) -> bytes:
        if self._done:
            return self._payload
        self._payload = self._router._complete_receive(self._rank, self._source, self._tag, self._max_bytes)
        self._done = True
        return self._payload


class _Collective:
    def __init__(self, kind, detail):
        self.kind = kind
        self.detail = detail
        self.contributions = {}
        self.result = None
        self.done = False


class Router:
    """Shared state behind all ranks of one run."""

    def __init__(self, size: int, seed: int = 0):
        self.size = size
        self.seed = seed
        self.stats = RouterStats()
        self.rank_stats = [RouterStats() for _ in range(size)]
        self._cond = threading.Condition()
        self._queues: dict[tuple[int, int, int], deque] = {}
        self._blocked: dict[int, tuple] = {}
        self._done: set[int] = set()
        self._current: _Collective | None = None
        self._abort: BaseException | None = None

    # -- point to point ----------------------------------------------------

    def post_send(self, source, destination, tag, payload: bytes):
        if not 0 <= destination < self.size:
            raise TransportError(f"destination rank {destination} outside [0, {self.size})")
        with self._cond:
            self._check_abort()
            self._queues.setdefault((source, destination, tag), deque()).append(bytes(payload))
            self.stats.p2p_messages += 1
            self.stats.p2p_bytes += len(payload)
            self.rank_stats[source].p2p_messages += 1
            self.rank_stats[source].p2p_bytes += len(payload)
            self._cond.notify_all()
        return SendHandle()

    def _complete_receive(self, rank, source, tag, max_bytes) -> bytes:
        key = (source, rank, tag)
        with self._cond:
            while True:
                self._check_abort()
                queue = self._queues.get(key)
                if queue:
                    payload = queue.popleft()
                    if len(payload) > max_bytes:
                        raise ReceiveOverflowError(
                            f"rank {rank}: message of {len(payload)} bytes from rank {source} "
                            f"tag {tag} exceeds declared maximum {max_bytes}"
                        )
                    return payload
                self._block(rank, ("recv", source, tag))
                try:
                    self._cond.wait()
                finally:
                    self._blocked.pop(rank, None)

    # -- collectives ---------------------------------------------------------

    def collective(self, rank, kind, detail, value):
        with self._cond:
            self._check_abort()
            if self._current is None or self._current.done:
                self._current = _Collective(kind, detail)
            coll = self._current
            if (coll.kind, coll.detail) != (kind, detail):
                self._abort = TransportError(
                    f"collective mismatch: rank {rank} called {kind}{detail} while "
                    f"{coll.kind}{coll.detail} is in progress"
                )
                self._cond.notify_all()
                raise self._abort
            coll.contributions[rank] = value
            self.rank_stats[rank].collectives[kind] += 1
            if len(coll.contributions) == self.size:
                coll.result = self._reduce(kind, detail, coll.contributions)
                coll.done = True
                self.stats.collectives[kind] += 1
                self._cond.notify_all()
            while not coll.done:
                self._block(rank, ("collective", coll))
                try:
                    self._cond.wait()
                finally:
                    self._blocked.pop(rank, None)
                self._check_abort()
            return coll.result

    @staticmethod
    def _reduce(kind, detail, contributions):
        ordered = [contributions[r] for r in sorted(contributions)]
        if kind == "allgather":
            return ordered
        if kind == "barrier":
            return None
        op = detail
        if op == "min":
            return min(ordered)
        if op == "max":
            return max(ordered)
        if op == "sum":
            total = ordered[0]
            for value in ordered[1:]:
                total = total + value
            return total
        raise TransportError(f"unknown reduction op {op!r}")

    # -- lifecycle / deadlock ------------------------------------------------

    def _block(self, rank, reason):
        self._blocked[rank] = reason
        if len(self._blocked) + len(self._done) == self.size:
            self._detect_deadlock()

    def _detect_deadlock(self):
        # Called with the lock held, when no rank is runnable. If any blocked
        # operation is satisfiable the system will make progress once woken.
        if self._abort is not None:
            return
        for rank, reason in self._blocked.items():
            if reason[0] == "recv":
                _, source, tag = reason
                if self._queues.get((source, rank, tag)):
                    return
            elif reason[1].done:
                return
        def describe(reason):
            if reason[0] == "recv":
                return f"recv(source={reason[1]}, tag={reason[2]})"
            return f"{reason[1].kind}({reason[1].detail})"

        detail = "; ".join(
            f"rank {rank} waiting on {describe(reason)}" for rank, reason in sorted(self._blocked.items())
        )
        self._abort = DeadlockError(f"all ranks blocked with no deliverable message: {detail}")
        self._cond.notify_all()

    def mark_done(self, rank):
        with self._cond:
            self._done.add(rank)
            if self._blocked and len(self._blocked) + len(self._done) == self.size:
                self._detect_deadlock()
            self._cond.notify_all()

    def abort(self, exc: BaseException):
        with self._cond:
            if self._abort is None:
                self._abort = exc
            self._cond.notify_all()

    def _check_abort(self):
        if self._abort is not None:
            raise self._abort


class Comm:
    """One rank's endpoint: point-to-point posts, waits and collectives."""

    def __init__(self, router: Router, rank: int):
        self.router = router
        self.rank = rank
        self.size = router.size

    # non-blocking primitives
    def post_send(self, destination: int, tag: int, payload: bytes) -> SendHandle:
        return self.router.post_send(self.rank, destination, tag, payload)

    def post_receive(self, source: int, tag: int, max_bytes: int) -> RecvHandle:
        return RecvHandle(self.router, self.rank, source, tag, max_bytes)

    @staticmethod
    def wait_all(handles):
        return [handle.wait() for handle in handles]

    # blocking convenience
    def send(self, destination: int, tag: int, payload: bytes):
        self.post_send(destination, tag, payload).wait()

    def recv(self, source: int, tag: int, max_bytes: int) -> bytes:
        return self.post_receive(source, tag, max_bytes).wait()

    # collectives
    def allreduce(self, value, op: str):
        return self.router.collective(self.rank, "allreduce", op, value)

    def allgather(self, block: bytes) -> list[bytes]:
        return self.router.collective(self.rank, "allgather", None, bytes(block))

    def barrier(self):
        self.router.collective(self.rank, "barrier", None, None)

    def stats_snapshot(self) -> dict:
        """This rank's own counters: messages it posted, collectives it joined."""
        return self.router.rank_stats[self.rank].snapshot()

    def global_stats_snapshot(self) -> dict:
        return self.router.stats.snapshot()


class SerialComm:
    """Size-1 communicator without a router, for direct library use."""

    rank = 0
    size = 1

    def __init__(self):
        self._stats = RouterStats()
        self._queues: dict[tuple[int, int, int], deque] = {}

    def post_send(self, destination, tag, payload: bytes):
        if destination != 0:
            raise TransportError(f"destination rank {destination} outside [0, 1)")
        self._queues.setdefault((0, 0, tag), deque()).append(bytes(payload))
        self._stats.p2p_messages += 1
        self._stats.p2p_bytes += len(payload)
        return SendHandle()

    def post_receive(self, source, tag, max_bytes):
        return _SerialRecv(self, source, tag, max_bytes)

    @staticmethod
    def wait_all(handles):
        return [handle.wait() for handle in handles]

    def send(self, destination, tag, payload):
        self.post_send(destination, tag, payload).wait()

    def recv(self, source, tag, max_bytes):
        return self.post_receive(source, tag, max_bytes).wait()

    def allreduce(self, value, op):
        if op not in ("min", "max", "sum"):
            raise TransportError(f"unknown reduction op {op!r}")
        self._stats.collectives["allreduce"] += 1
        return value

    def allgather(self, block: bytes):
        self._stats.collectives["allgather"] += 1
        return [bytes(block)]

    def barrier(self):
        self._stats.collectives["barrier"] += 1

    def stats_snapshot(self):
        return self._stats.snapshot()

    def global_stats_snapshot(self):
        return self._stats.snapshot()


class _SerialRecv:
    def __init__(self, comm, source, tag, max_bytes):
        self._comm = comm
        self._key = (source, 0, tag)
        self._max_bytes = max_bytes

    def wait(self):
        queue = self._comm._queues.get(self._key)
        if not queue:
            raise DeadlockError(f"serial receive on {self._key} with no queued message")
        payload = queue.popleft()
        if len(payload) > self._max_bytes:
            raise ReceiveOverflowError(
                f"message of {len(payload)} bytes exceeds declared maximum {self._max_bytes}"
            )
        return payload


def gather_to_root(comm, payload: bytes, tag: int, root: int = 0) -> list[bytes] | None:
    """Point-to-point gather (deliberately not a collective): root returns all
    ranks' payloads in rank order, other ranks return None."""
    if comm.size == 1:
        return [bytes(payload)]
    if comm.rank == root:
        out = []
        for source in range(comm.size):
            if source == root:
                out.append(bytes(payload))
            else:
                out.append(comm.recv(source, tag, 1 << 62))
        return out
    comm.send(root, tag, payload)
    return None


def run_ranks(size: int, program, seed: int = 0, timeout: float | None = None):
    """Run ``program(comm)`` once per rank on concurrent threads.

    Returns the per-rank results as a list. Any rank's exception aborts the
    whole run and is re-raised. Message matching is exact on (source, tag),
    so results do not depend on thread interleaving; the seed is kept on the
    router for schedule-perturbing test harnesses.
    """
    if size < 1:
        raise ValueError(f"rank count must be >= 1, got {size}")
    router = Router(size, seed=seed)
    results = [None] * size
    errors = {}

    def body(rank):
        try:
            results[rank] = program(Comm(router, rank))
        except BaseException as exc:  # propagated to the caller below
            errors[rank] = exc
            router.abort(exc)
        finally:
            router.mark_done(rank)

    threads = [threading.Thread(target=body, args=(rank,), name=f"rank-{rank}") for rank in range(size)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout)
        if thread.is_alive():
            router.abort(TransportError(f"run_ranks timeout after {timeout} s"))
    for thread in threads:
        thread.join()
    if errors:
        raise errors[min(errors)]
    return results
