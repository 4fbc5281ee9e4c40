"""Demand store: the warehouse plus a leased pending queue.

Every computed value lands here and is served from here instead of being
recomputed.  Per entry the state machine is PENDING -> IN_PROCESS ->
COMPUTED; COMPUTED is terminal and immutable.  Workers claim pending
demands under a lease; when a lease expires the sweep sends the entry back
to PENDING, which gives at-least-once delivery.  A second fulfill must
match the stored value byte-for-byte (idempotent completion) or it is
rejected as conflicting.

All operations take one lock, so the store is linearizable; ``await_result``
blocks on a condition that ``fulfill`` notifies.  When a log path is given,
deposits, fulfills and resource puts are appended as wire frames and
replayed on startup, so a restart recovers the warehouse and re-queues
whatever was in flight.
"""
from __future__ import annotations

import enum
import heapq
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Tuple

from .errors import EductionError
from . import wire
from .model import (
    Demand,
    DemandKind,
    DemandSignature,
    DemandState,
    MalformedDemand,
    Value,
    is_finite_value,
)
from .wire import MsgType

DEFAULT_LEASE_MS = 5000
DEFAULT_SWEEP_MS = 500


class NotClaimed(EductionError):
    pass


class ConflictingResult(EductionError):
    pass


class NonFiniteValue(EductionError):
    pass


class NotFound(EductionError):
    pass


class Timeout(EductionError):
    pass


class DepositStatus(enum.Enum):
    ENQUEUED = 0
    ALREADY_COMPUTED = 1
    DUPLICATE_PENDING = 2


@dataclass(frozen=True)
class DepositOutcome:
    status: DepositStatus
    value: Optional[Value] = None


@dataclass
class StoreEntry:
    demand: Demand
    deposited_at: float
    computed_at: Optional[float] = None
    hit_count: int = 0


@dataclass(frozen=True)
class Lease:
    signature_key: bytes
    worker_id: str
    expiry: float


@dataclass(frozen=True)
class StoreStats:
    deposits: int
    hits: int
    misses: int
    computed: int
    pending: int
    in_process: int
    redeliveries: int

    def as_line(self) -> str:
        return (
            f"deposits={self.deposits} hits={self.hits} misses={self.misses} "
            f"computed={self.computed} pending={self.pending} "
            f"in_process={self.in_process} redeliveries={self.redeliveries}"
        )


def _monotonic_ms() -> float:
    return time.monotonic() * 1000.0


class DemandStore:
    """In-memory demand store with optional append-only persistence."""

    def __init__(self, log_path: Optional[str] = None, clock: Callable[[], float] = _monotonic_ms):
        self._clock = clock
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._entries: dict[bytes, StoreEntry] = {}
        self._leases: dict[bytes, Lease] = {}
        self._queues: dict[DemandKind, list] = {k: [] for k in DemandKind}
        self._resources: dict[str, bytes] = {}
        self._deposits = 0
        self._hits = 0
        self._misses = 0
        self._redeliveries = 0
        self._counts = {DemandState.PENDING: 0, DemandState.IN_PROCESS: 0, DemandState.COMPUTED: 0}
        self._log = None
        self._sweeper: Optional[threading.Thread] = None
        self._sweeper_stop: Optional[threading.Event] = None
        if log_path is not None:
            self._open_log(log_path)

    # -- time ------------------------------------------------------------

    def now(self) -> float:
        return self._clock()

    # -- core operations ---------------------------------------------------

    def deposit(self, d: Demand) -> DepositOutcome:
        if d.state is not DemandState.PENDING or d.result is not None:
            raise MalformedDemand("deposits must be PENDING and carry no result")
        try:
            key = d.signature.key()
        except EductionError as e:
            raise MalformedDemand(str(e)) from None
        with self._cond:
            self._deposits += 1
            entry = self._entries.get(key)
            if entry is not None:
                if entry.demand.state is DemandState.COMPUTED:
                    entry.hit_count += 1
                    self._hits += 1
                    return DepositOutcome(DepositStatus.ALREADY_COMPUTED, entry.demand.result)
                self._misses += 1
                return DepositOutcome(DepositStatus.DUPLICATE_PENDING)
            self._misses += 1
            fresh = Demand(d.signature)
            entry = StoreEntry(demand=fresh, deposited_at=self.now())
            self._entries[key] = entry
            self._counts[DemandState.PENDING] += 1
            heapq.heappush(self._queues[d.signature.kind], (entry.deposited_at, key))
            self._append_log(MsgType.DEPOSIT, wire.encode_demand(fresh))
            return DepositOutcome(DepositStatus.ENQUEUED)

    def claim(self, worker_id: str, kinds: Iterable[DemandKind], lease_ms: float) -> Optional[Demand]:
        if lease_ms <= 0:
            raise MalformedDemand("lease_ms must be positive")
        with self._cond:
            now = self.now()
            best = None  # (deposited_at, key, kind)
            for kind in kinds:
                q = self._queues[kind]
                while q:
                    deposited_at, key = q[0]
                    entry = self._entries.get(key)
                    if entry is not None and entry.demand.state is DemandState.PENDING:
                        if best is None or (deposited_at, key) < best[:2]:
                            best = (deposited_at, key, kind)
                        break
                    heapq.heappop(q)  # stale heap entry
            if best is None:
                return None
            _, key, kind = best
            heapq.heappop(self._queues[kind])
            entry = self._entries[key]
            expiry = now + lease_ms
            entry.demand = replace(entry.demand, state=DemandState.IN_PROCESS, lease_expiry=expiry)
            self._counts[DemandState.PENDING] -= 1
            self._counts[DemandState.IN_PROCESS] += 1
            self._leases[key] = Lease(key, worker_id, expiry)
            return entry.demand

    def fulfill(self, sig: DemandSignature, value: Value, worker_id: str) -> None:
        if not is_finite_value(value):
            raise NonFiniteValue(f"refusing to store a non-finite value for {sig}")
        key = sig.key()
        with self._cond:
            entry = self._entries.get(key)
            if entry is None:
                raise NotClaimed(f"unknown signature {sig}")
            if entry.demand.state is DemandState.COMPUTED:
                if wire.values_equal(entry.demand.result, value):
                    return  # idempotent completion
                raise ConflictingResult(f"{sig}: stored result differs")
            lease = self._leases.get(key)
            if lease is None or lease.worker_id != worker_id:
                raise NotClaimed(f"{sig} is not claimed by {worker_id!r}")
            prev_state = entry.demand.state
            entry.demand = replace(
                entry.demand, state=DemandState.COMPUTED, result=value, lease_expiry=None
            )
            entry.computed_at = self.now()
            del self._leases[key]
            self._counts[prev_state] -= 1
            self._counts[DemandState.COMPUTED] += 1
            self._append_log(MsgType.FULFILL, wire.encode_signature(sig) + wire.encode_value(value))
            self._cond.notify_all()

    def fetch(self, sig: DemandSignature) -> Tuple[DemandState, Optional[Value]]:
        key = sig.key()
        with self._cond:
            entry = self._entries.get(key)
            if entry is None:
                self._misses += 1
                raise NotFound(str(sig))
            if entry.demand.state is DemandState.COMPUTED:
                entry.hit_count += 1
                self._hits += 1
                return DemandState.COMPUTED, entry.demand.result
            self._misses += 1
            return entry.demand.state, None

    def await_result(self, sig: DemandSignature, timeout_ms: float) -> Value:
        key = sig.key()
        deadline = self.now() + timeout_ms
        with self._cond:
            while True:
                entry = self._entries.get(key)
                if entry is None:
                    raise NotFound(str(sig))
                if entry.demand.state is DemandState.COMPUTED:
                    entry.hit_count += 1
                    self._hits += 1
                    return entry.demand.result
                remaining = deadline - self.now()
                if remaining <= 0:
                    raise Timeout(f"no result for {sig} within {timeout_ms} ms")
                self._cond.wait(remaining / 1000.0)

    def sweep_expired_leases(self, now: Optional[float] = None) -> int:
        """Return expired IN_PROCESS entries to PENDING for redelivery."""
        with self._cond:
            if now is None:
                now = self.now()
            expired = [lease for lease in self._leases.values() if lease.expiry < now]
            for lease in expired:
                del self._leases[lease.signature_key]
                entry = self._entries[lease.signature_key]
                entry.demand = replace(
                    entry.demand,
                    state=DemandState.PENDING,
                    lease_expiry=None,
                    attempts=entry.demand.attempts + 1,
                )
                self._counts[DemandState.IN_PROCESS] -= 1
                self._counts[DemandState.PENDING] += 1
                heapq.heappush(
                    self._queues[entry.demand.signature.kind], (entry.deposited_at, lease.signature_key)
                )
                self._redeliveries += 1
            return len(expired)

    # -- resources ---------------------------------------------------------

    def put_resource(self, program_id: str, data: bytes) -> None:
        _validate_resource(data)
        with self._cond:
            if self._resources.get(program_id) == data:
                return  # idempotent re-put
            self._resources[program_id] = data
            self._append_log(
                MsgType.RESOURCE_PUT,
                wire.encode_value(program_id) + len(data).to_bytes(4, "big") + data,
            )

    def get_resource(self, program_id: str) -> bytes:
        with self._cond:
            try:
                return self._resources[program_id]
            except KeyError:
                raise NotFound(f"no resource {program_id!r}") from None

    # -- stats ---------------------------------------------------------------

    def stats(self) -> StoreStats:
        with self._cond:
            return StoreStats(
                deposits=self._deposits,
                hits=self._hits,
                misses=self._misses,
                computed=self._counts[DemandState.COMPUTED],
                pending=self._counts[DemandState.PENDING],
                in_process=self._counts[DemandState.IN_PROCESS],
                redeliveries=self._redeliveries,
            )

    # -- persistence ---------------------------------------------------------

    def _open_log(self, path: str):
        good_end = 0
        if os.path.exists(path):
            with open(path, "rb") as f:
                data = f.read()
            try:
                for msg_type, payload, end in wire.iter_frames(data):
                    self._replay(msg_type, payload)
                    good_end = end
            except EductionError:
                pass  # stop at the first corrupt record; truncate below
            if good_end != len(data):
                with open(path, "r+b") as f:
                    f.truncate(good_end)
        self._log = open(path, "ab")

    def _replay(self, msg_type: MsgType, payload: bytes):
        if msg_type is MsgType.DEPOSIT:
            d = wire.decode_demand(payload)
            key = d.signature.key()
            if key not in self._entries:
                self._deposits += 1
                entry = StoreEntry(demand=Demand(d.signature), deposited_at=self.now())
                self._entries[key] = entry
                self._counts[DemandState.PENDING] += 1
                heapq.heappush(self._queues[d.signature.kind], (entry.deposited_at, key))
        elif msg_type is MsgType.FULFILL:
            r = wire.Reader(payload)
            sig = wire.read_signature(r)
            value = wire.read_value(r)
            r.expect_done()
            key = sig.key()
            entry = self._entries.get(key)
            if entry is None:
                entry = StoreEntry(demand=Demand(sig), deposited_at=self.now())
                self._entries[key] = entry
                self._counts[DemandState.PENDING] += 1
            if entry.demand.state is not DemandState.COMPUTED:
                self._counts[entry.demand.state] -= 1
                self._counts[DemandState.COMPUTED] += 1
                entry.demand = replace(
                    entry.demand, state=DemandState.COMPUTED, result=value, lease_expiry=None
                )
                entry.computed_at = self.now()
        elif msg_type is MsgType.RESOURCE_PUT:
            r = wire.Reader(payload)
            program_id = wire.read_value(r)
            n = r.u32()
            self._resources[program_id] = r.take(n)
            r.expect_done()
        # other frame types never appear in the log

    def _append_log(self, msg_type: MsgType, payload: bytes):
        if self._log is not None:
            self._log.write(wire.encode_frame(msg_type, payload))
            self._log.flush()

    # -- background sweeper ----------------------------------------------------

    def start_sweeper(self, interval_ms: float = DEFAULT_SWEEP_MS):
        if self._sweeper is not None:
            return
        stop = threading.Event()

        def loop():
            while not stop.wait(interval_ms / 1000.0):
                self.sweep_expired_leases()

        self._sweeper_stop = stop
        self._sweeper = threading.Thread(target=loop, name="dst-sweeper", daemon=True)
        self._sweeper.start()

    def stop_sweeper(self):
        if self._sweeper is not None:
            self._sweeper_stop.set()
            self._sweeper.join()
            self._sweeper = None
            self._sweeper_stop = None

    def close(self):
        self.stop_sweeper()
        if self._log is not None:
            self._log.close()
            self._log = None


def _validate_resource(data: bytes):
    """Resources are tagged blobs: compiled programs or serialized models."""
    from . import lang, pipeline

    if data[:5] == wire.GEER_MAGIC:
        wire.decode_geer(data)
        return
    if data[:5] == pipeline.TSET_MAGIC:
        pipeline.decode_training_set(data)
        return
    raise lang.MalformedGeer("unknown resource payload")
