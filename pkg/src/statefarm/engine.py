"""Concurrent task-farm topology: emitter, worker pool, collector, feedback.

Thread layout: one emitter thread, one thread per worker, one collector
thread.  All cross-thread traffic flows through FIFO channels:

  task inbox      (bounded)    driver -> emitter
  worker inboxes  (bounded)    emitter -> worker (tasks, updates, control)
  output queue    (bounded)    workers -> collector
  control inbox   (unbounded)  collector/controller/workers -> emitter

The control inbox is deliberately unbounded: the feedback path
collector -> emitter -> workers closes a cycle over the data channels, and a
bounded feedback channel could deadlock with every data queue full.  The
collector never performs a blocking put, which makes the blocking-backpressure
data channels deadlock-free at any capacity >= 1.

Termination: the driver closes the input, the emitter delivers one
end-of-stream marker to every active worker, each worker flushes its local
state and reports done to the collector, and the collector exits once every
worker that was ever started has reported.

Worker-count changes are applied by the emitter between dispatches, so
routing is quiescent during a migration.  For the partitioned pattern the
emitter asks each affected worker to surrender the moving partition entries
(the request queues FIFO behind the worker's in-flight tasks, which drains
them), then hands the entries to their new owners before resuming.
"""

from __future__ import annotations

import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from queue import Empty, Full, Queue
from typing import Any, Callable, Optional

from . import patterns
from .adaptivity import AdaptivityError, MigrationPlan, PartitionMap, plan_migration
from .patterns import (
    AccumulatorSpec,
    ApproxSpec,
    PartitionedSpec,
    PatternSpec,
    SeparateSpec,
    SerialSpec,
    Variant,
)

_POLL_S = 0.002


class Scheduling(Enum):
    ROUND_ROBIN = "round_robin"
    ON_DEMAND = "on_demand"
    KEY_DIRECTED = "key_directed"


class FarmConfigError(ValueError):
    """Invalid farm configuration or pattern/config mismatch."""


class FarmStateError(RuntimeError):
    """Operation issued in the wrong farm lifecycle state."""


class FarmRuntimeError(RuntimeError):
    """A concurrent activity failed; carries partial metrics."""

    def __init__(self, message: str, metrics: "RunMetrics | None" = None):
        super().__init__(message)
        self.metrics = metrics


class OwnershipError(AssertionError):
    """A worker touched a partition entry it does not own."""


@dataclass(frozen=True)
class FarmConfig:
    n_workers: int
    queue_capacity: int = 512
    scheduling: Scheduling = Scheduling.ROUND_ROBIN
    collector_enabled: bool = True
    feedback_enabled: bool = False
    preserve_order: bool = False


@dataclass
class StreamEnvelope:
    seq: int
    payload: Any
    key: Optional[int] = None
    release_us: float = 0.0


@dataclass(frozen=True)
class ErrorResult:
    """Placed on the output stream for a task rejected before processing."""

    seq: int
    message: str


@dataclass
class RunMetrics:
    completion_us: float = 0.0
    tasks_fed: int = 0
    tasks_processed: int = 0
    outputs_drained: int = 0
    worker_task_counts: dict[int, int] = field(default_factory=dict)
    migrated_partitions: int = 0
    errors: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Channel messages


class _EndOfInput:
    pass


class _Eos:
    pass


@dataclass
class _StateUpdate:
    value: Any


@dataclass
class _Surrender:
    partitions: list[int]


@dataclass
class _SurrenderReply:
    worker_id: int
    entries: list[tuple[int, Any]]


@dataclass
class _Adopt:
    entries: dict[int, Any]


@dataclass
class _SurrenderLocal:
    pass


@dataclass
class _LocalReply:
    worker_id: int
    value: Any


@dataclass
class _Absorb:
    value: Any


@dataclass
class _Retire:
    flush: bool = True


@dataclass
class _Result:
    seq: int
    value: Any


@dataclass
class _ErrorResultMsg:
    seq: int
    message: str


@dataclass
class _Flush:
    value: Any


@dataclass
class _Candidate:
    value: Any


@dataclass
class _PartState:
    index: int
    value: Any


@dataclass
class _StateVal:
    value: Any


@dataclass
class _WorkerDone:
    worker_id: int


@dataclass
class _FeedbackUpdate:
    value: Any


@dataclass
class _Resize:
    delta: int
    ack: threading.Event
    error: list = field(default_factory=list)


@dataclass
class _Merge:
    survivor: int
    retired: int
    ack: threading.Event
    error: list = field(default_factory=list)


class _EmitterStop:
    pass


# ---------------------------------------------------------------------------
# Scheduling


def schedule_next(
    scheduling: Scheduling,
    *,
    n_workers: int = 0,
    previous: int = -1,
    occupancies: Optional[list[int]] = None,
    capacity: int = 0,
    key: Optional[int] = None,
    partition_map: Optional[PartitionMap] = None,
) -> Optional[int]:
    """Pick the worker index for the next task under the given policy.

    RoundRobin: (previous + 1) mod n_workers.  OnDemand: least-occupied queue
    below capacity, lowest index on ties, None when all are full (the caller
    blocks and retries).  KeyDirected: the partition map's owner of the key.
    """
    if scheduling is Scheduling.ROUND_ROBIN:
        return (previous + 1) % n_workers
    if scheduling is Scheduling.ON_DEMAND:
        assert occupancies is not None
        eligible = [(occ, i) for i, occ in enumerate(occupancies) if occ < capacity]
        if not eligible:
            return None
        return min(eligible)[1]
    assert partition_map is not None and key is not None
    return partition_map.owner(key)


# ---------------------------------------------------------------------------
# State cells shared by workers


class _SequencedCell:
    """State cell granting exclusive access in strict seq order.

    A worker holding task seq k blocks until all tasks < k have updated the
    state, which makes the computation serial and deterministic.
    """

    def __init__(self, initial: Any, abort: threading.Event):
        self.state = initial
        self.next_seq = 0
        self._cond = threading.Condition()
        self._abort = abort

    def apply(self, seq: int, step: Callable[[Any], tuple[Any, Any]]) -> Any:
        with self._cond:
            while self.next_seq != seq:
                if self._abort.is_set():
                    raise FarmRuntimeError("farm aborted while waiting for state turn")
                self._cond.wait(timeout=0.05)
            result, self.state = step(self.state)
            self.next_seq += 1
            self._cond.notify_all()
            return result


class _LockedCell:
    """State cell with plain mutual exclusion (no ordering)."""

    def __init__(self, initial: Any):
        self.state = initial
        self.lock = threading.Lock()


# ---------------------------------------------------------------------------
# Pattern behaviors (worker-side and collector-side hooks)


class _Behavior:
    needs_key_routing = False
    needs_feedback = False

    def __init__(self, spec: PatternSpec, config: FarmConfig):
        self.spec = spec
        self.config = config

    # worker side
    def worker_init(self, worker: "_Worker") -> None:
        pass

    def worker_task(self, worker: "_Worker", env: StreamEnvelope) -> None:
        raise NotImplementedError

    def worker_update(self, worker: "_Worker", value: Any) -> None:
        pass

    def worker_finish(self, worker: "_Worker") -> None:
        pass

    def worker_surrender(self, worker: "_Worker", parts: list[int]) -> list[tuple[int, Any]]:
        raise FarmStateError("pattern does not support partition surrender")

    def worker_adopt(self, worker: "_Worker", entries: dict[int, Any]) -> None:
        raise FarmStateError("pattern does not support partition adoption")

    def worker_surrender_local(self, worker: "_Worker") -> Any:
        raise FarmStateError("pattern does not support local-state surrender")

    def worker_absorb(self, worker: "_Worker", value: Any) -> None:
        raise FarmStateError("pattern does not support local-state absorb")

    # collector side
    def collector_msg(self, msg: Any, emit: Callable[[Any], None], broadcast: Callable[[Any], None]) -> None:
        raise FarmRuntimeError(f"unexpected collector message {msg!r}")

    def final_state(self) -> Any:
        return None

    # adaptivity
    def grow_local(self) -> Any:
        return None


class _SerialBehavior(_Behavior):
    def __init__(self, spec: SerialSpec, config: FarmConfig, abort: threading.Event):
        super().__init__(spec, config)
        self.cell = _SequencedCell(spec.s0, abort)

    def worker_task(self, worker, env):
        spec = self.spec
        task = env.payload

        def step(state):
            return spec.f(task, state), spec.s(task, state)

        y = self.cell.apply(env.seq, step)
        worker.send(_Result(env.seq, y))

    def final_state(self):
        return self.cell.state


class _SeparateBehavior(_Behavior):
    def __init__(self, spec: SeparateSpec, config: FarmConfig):
        super().__init__(spec, config)
        self.cell = _LockedCell(spec.s0)

    def worker_task(self, worker, env):
        spec = self.spec
        y = spec.f(env.payload)
        # Single mutual-exclusion region: read, update, write back, emit.
        with self.cell.lock:
            new = spec.s(y, self.cell.state)
            self.cell.state = new
            if spec.emit_cond is None or spec.emit_cond(new):
                worker.send(_StateVal(new))

    def collector_msg(self, msg, emit, broadcast):
        emit(msg.value)

    def final_state(self):
        return self.cell.state


class _AccumulatorBehavior(_Behavior):
    def __init__(self, spec: AccumulatorSpec, config: FarmConfig):
        super().__init__(spec, config)
        self.global_acc = spec.s_zero

    def worker_init(self, worker):
        worker.local = self.spec.s_zero
        worker.since_flush = 0

    def worker_task(self, worker, env):
        spec = self.spec
        task = env.payload
        y = spec.f(task, worker.local)
        worker.local = spec.oplus(spec.g(task), worker.local)
        worker.since_flush += 1
        if worker.since_flush >= spec.flush_frequency:
            worker.send(_Flush(worker.local))
            worker.local = spec.s_zero
            worker.since_flush = 0
        worker.send(_Result(env.seq, y))

    def worker_finish(self, worker):
        worker.send(_Flush(worker.local))
        worker.local = self.spec.s_zero

    def worker_surrender_local(self, worker):
        value = worker.local
        worker.local = self.spec.s_zero
        worker.since_flush = 0
        return value

    def worker_absorb(self, worker, value):
        worker.local = self.spec.oplus(value, worker.local)

    def collector_msg(self, msg, emit, broadcast):
        self.global_acc = self.spec.oplus(msg.value, self.global_acc)

    def final_state(self):
        return self.global_acc

    def grow_local(self):
        return self.spec.s_zero


class _ApproxBehavior(_Behavior):
    needs_feedback = True

    def __init__(self, spec: ApproxSpec, config: FarmConfig):
        super().__init__(spec, config)
        self.global_best = spec.s_init
        self.accept_log: list[Any] = []
        self._lock = threading.Lock()

    def worker_init(self, worker):
        worker.local = self.spec.s_init

    def worker_task(self, worker, env):
        spec = self.spec
        task = env.payload
        if spec.c(task, worker.local):
            candidate = spec.s_prime(task, worker.local)
            worker.local = candidate
            worker.send(_Candidate(candidate))

    def worker_update(self, worker, value):
        worker.local = value

    def collector_msg(self, msg, emit, broadcast):
        if self.spec.less_than(msg.value, self.global_best):
            with self._lock:
                self.global_best = msg.value
            self.accept_log.append(msg.value)
            emit(msg.value)
            broadcast(msg.value)

    def final_state(self):
        with self._lock:
            return self.global_best

    def grow_local(self):
        if self.spec.grow_seed_from_global:
            return self.final_state()
        return self.spec.s_init


class _PartitionedBehavior(_Behavior):
    needs_key_routing = True

    def __init__(self, spec: PartitionedSpec, config: FarmConfig):
        super().__init__(spec, config)
        self.vector: list[Any] = [None] * spec.n_partitions
        # Instrumented ownership registry: partition index -> worker id.
        self._owner_of: dict[int, int] = {}
        self._reg_lock = threading.Lock()

    def _claim(self, index: int, worker_id: int) -> None:
        with self._reg_lock:
            holder = self._owner_of.get(index)
            if holder is not None:
                raise OwnershipError(
                    f"partition {index} claimed by worker {worker_id} while owned by {holder}"
                )
            self._owner_of[index] = worker_id

    def _release(self, index: int, worker_id: int) -> None:
        with self._reg_lock:
            holder = self._owner_of.pop(index, None)
            if holder != worker_id:
                raise OwnershipError(
                    f"partition {index} released by worker {worker_id} but owned by {holder}"
                )

    def init_partitions(self, worker: "_Worker", indices: list[int]) -> None:
        for i in indices:
            self._claim(i, worker.worker_id)
            worker.partitions[i] = self.spec.s_init

    def worker_init(self, worker):
        worker.partitions = {}

    def worker_task(self, worker, env):
        spec = self.spec
        key = env.key
        if key not in worker.partitions:
            raise OwnershipError(
                f"worker {worker.worker_id} received task for unowned partition {key}"
            )
        value = worker.partitions[key]
        y = spec.f(env.payload, value)
        worker.partitions[key] = spec.s(env.payload, value)
        worker.send(_Result(env.seq, y))

    def worker_finish(self, worker):
        for index in sorted(worker.partitions):
            value = worker.partitions.pop(index)
            self._release(index, worker.worker_id)
            worker.send(_PartState(index, value))

    def worker_surrender(self, worker, parts):
        entries = []
        for index in parts:
            if index not in worker.partitions:
                raise OwnershipError(
                    f"worker {worker.worker_id} asked to surrender unowned partition {index}"
                )
            entries.append((index, worker.partitions.pop(index)))
            self._release(index, worker.worker_id)
        return entries

    def worker_adopt(self, worker, entries):
        for index, value in entries.items():
            self._claim(index, worker.worker_id)
            if index in worker.partitions:
                raise OwnershipError(
                    f"worker {worker.worker_id} adopting already-held partition {index}"
                )
            worker.partitions[index] = value

    def collector_msg(self, msg, emit, broadcast):
        if self.vector[msg.index] is not None:
            raise OwnershipError(f"partition {msg.index} delivered twice at termination")
        self.vector[msg.index] = msg.value

    def final_state(self):
        return list(self.vector)


def _make_behavior(spec: PatternSpec, config: FarmConfig, abort: threading.Event) -> _Behavior:
    if isinstance(spec, SerialSpec):
        return _SerialBehavior(spec, config, abort)
    if isinstance(spec, SeparateSpec):
        return _SeparateBehavior(spec, config)
    if isinstance(spec, AccumulatorSpec):
        return _AccumulatorBehavior(spec, config)
    if isinstance(spec, ApproxSpec):
        return _ApproxBehavior(spec, config)
    if isinstance(spec, PartitionedSpec):
        return _PartitionedBehavior(spec, config)
    raise FarmConfigError(f"unknown pattern spec {spec!r}")


# ---------------------------------------------------------------------------
# Concurrent activities


class _Worker:
    def __init__(self, farm: "FarmHandle", worker_id: int):
        self.farm = farm
        self.worker_id = worker_id
        self.inbox: Queue = Queue(maxsize=farm.config.queue_capacity)
        self.thread = threading.Thread(
            target=self._run, name=f"farm-worker-{worker_id}", daemon=True
        )
        self.processed_seqs: list[int] = []
        self.received_updates: list[Any] = []
        self.task_count = 0
        self.eos_sent = False
        # pattern-local state, managed by the behavior
        self.local: Any = None
        self.since_flush = 0
        self.partitions: dict[int, Any] = {}
        farm.behavior.worker_init(self)

    def send(self, msg: Any) -> None:
        self.farm._out_queue.put(msg)

    def _run(self) -> None:
        farm = self.farm
        behavior = farm.behavior
        try:
            while True:
                msg = self.inbox.get()
                if isinstance(msg, StreamEnvelope):
                    behavior.worker_task(self, msg)
                    self.processed_seqs.append(msg.seq)
                    self.task_count += 1
                elif isinstance(msg, _StateUpdate):
                    self.received_updates.append(msg.value)
                    behavior.worker_update(self, msg.value)
                elif isinstance(msg, _Surrender):
                    entries = behavior.worker_surrender(self, msg.partitions)
                    farm._control_inbox.put(_SurrenderReply(self.worker_id, entries))
                elif isinstance(msg, _Adopt):
                    behavior.worker_adopt(self, msg.entries)
                elif isinstance(msg, _SurrenderLocal):
                    value = behavior.worker_surrender_local(self)
                    farm._control_inbox.put(_LocalReply(self.worker_id, value))
                elif isinstance(msg, _Absorb):
                    behavior.worker_absorb(self, msg.value)
                elif isinstance(msg, _Retire):
                    if msg.flush:
                        behavior.worker_finish(self)
                    break
                elif isinstance(msg, _Eos):
                    behavior.worker_finish(self)
                    break
        except BaseException as exc:  # noqa: BLE001 - propagate via farm abort
            farm._record_error(f"worker {self.worker_id}: {exc!r}")
        finally:
            self.farm._out_queue.put(_WorkerDone(self.worker_id))


class _Emitter:
    def __init__(self, farm: "FarmHandle"):
        self.farm = farm
        self.thread = threading.Thread(target=self._run, name="farm-emitter", daemon=True)
        self.rr_previous = -1
        self.dispatched = 0
        self._pace_t0: Optional[float] = None
        self._pending_control: list[Any] = []

    # -- helpers

    def _put(self, q: Queue, item: Any) -> bool:
        while True:
            try:
                q.put(item, timeout=0.05)
                return True
            except Full:
                if self.farm._abort.is_set():
                    return False

    def _broadcast(self, value: Any) -> None:
        for worker in self.farm._slots:
            if not worker.eos_sent:
                self._put(worker.inbox, _StateUpdate(value))

    # -- control handling

    def _handle_control(self, msg: Any) -> None:
        farm = self.farm
        if isinstance(msg, _FeedbackUpdate):
            self._broadcast(msg.value)
        elif isinstance(msg, _Resize):
            try:
                self._apply_resize(msg.delta)
            except Exception as exc:  # noqa: BLE001 - reported to the caller
                msg.error.append(exc)
            finally:
                msg.ack.set()
        elif isinstance(msg, _Merge):
            try:
                self._apply_merge(msg.survivor, msg.retired)
            except Exception as exc:  # noqa: BLE001
                msg.error.append(exc)
            finally:
                msg.ack.set()

    def _pump_control(self) -> None:
        while self._pending_control:
            self._handle_control(self._pending_control.pop(0))
        while True:
            try:
                msg = self.farm._control_inbox.get_nowait()
            except Empty:
                return
            if isinstance(msg, _EmitterStop):
                # Only sent after input close; re-queue defensively.
                self.farm._control_inbox.put(msg)
                return
            self._handle_control(msg)

    def _await_reply(self, reply_type, expected_ids: set[int]) -> list[Any]:
        """Collect control replies from workers, forwarding feedback meanwhile."""
        replies = []
        while expected_ids:
            msg = self.farm._control_inbox.get()
            if isinstance(msg, reply_type) and msg.worker_id in expected_ids:
                expected_ids.discard(msg.worker_id)
                replies.append(msg)
            elif isinstance(msg, _FeedbackUpdate):
                self._broadcast(msg.value)
            else:
                self._pending_control.append(msg)
        return replies

    # -- adaptivity

    def _apply_resize(self, delta: int) -> None:
        farm = self.farm
        new_n = len(farm._slots) + delta
        if new_n < 1:
            raise AdaptivityError("cannot shrink below one worker")
        if delta == 0:
            return
        if farm.behavior.needs_key_routing:
            assert farm._pmap is not None
            plan = plan_migration(farm._pmap, new_n)
            if delta > 0:
                for _ in range(delta):
                    farm._spawn_worker()
                self._migrate(plan)
            else:
                departing = farm._slots[new_n:]
                self._migrate(plan)
                for worker in departing:
                    self._put(worker.inbox, _Retire(flush=True))
                    worker.eos_sent = True
                del farm._slots[new_n:]
            farm._pmap = plan.new_map
            farm._metrics.migrated_partitions += len(plan.moves)
        elif delta > 0:
            for _ in range(delta):
                farm._spawn_worker(local=farm.behavior.grow_local())
        else:
            departing = farm._slots[new_n:]
            for worker in departing:
                self._put(worker.inbox, _Retire(flush=True))
                worker.eos_sent = True
            del farm._slots[new_n:]
        self.rr_previous = -1

    def _migrate(self, plan: MigrationPlan) -> None:
        farm = self.farm
        by_source: dict[int, list[int]] = defaultdict(list)
        for move in plan.moves:
            by_source[move.from_worker].append(move.partition)
        if not by_source:
            return
        id_of_slot = {slot: w.worker_id for slot, w in enumerate(farm._slots)}
        expected = set()
        for slot, parts in by_source.items():
            self._put(farm._slots[slot].inbox, _Surrender(parts))
            expected.add(id_of_slot[slot])
        replies = self._await_reply(_SurrenderReply, expected)
        new_owner = {move.partition: move.to_worker for move in plan.moves}
        entries_by_dest: dict[int, dict[int, Any]] = defaultdict(dict)
        for reply in replies:
            for index, value in reply.entries:
                entries_by_dest[new_owner[index]][index] = value
        for slot, entries in entries_by_dest.items():
            self._put(farm._slots[slot].inbox, _Adopt(entries))

    def _apply_merge(self, survivor_id: int, retired_id: int) -> None:
        farm = self.farm
        if not isinstance(farm.spec, AccumulatorSpec):
            raise FarmStateError("merge_workers is only defined for the accumulator pattern")
        if survivor_id == retired_id:
            raise AdaptivityError("cannot merge a worker with itself")
        by_id = {w.worker_id: w for w in farm._slots}
        if survivor_id not in by_id or retired_id not in by_id:
            raise AdaptivityError("both merge operands must be active workers")
        if len(farm._slots) < 2:
            raise AdaptivityError("cannot merge below one worker")
        retired = by_id[retired_id]
        self._put(retired.inbox, _SurrenderLocal())
        (reply,) = self._await_reply(_LocalReply, {retired_id})
        self._put(by_id[survivor_id].inbox, _Absorb(reply.value))
        self._put(retired.inbox, _Retire(flush=False))
        retired.eos_sent = True
        farm._slots.remove(retired)
        self.rr_previous = -1

    # -- dispatch

    def _pick_slot(self, env: StreamEnvelope) -> Optional[int]:
        farm = self.farm
        scheduling = farm.config.scheduling
        if scheduling is Scheduling.KEY_DIRECTED:
            spec = farm.spec
            key = spec.h(env.payload)
            if not 0 <= key < spec.n_partitions:
                farm._out_queue.put(
                    _ErrorResultMsg(env.seq, f"h(x)={key} outside [0, {spec.n_partitions})")
                )
                return None
            env.key = key
            return schedule_next(scheduling, key=key, partition_map=farm._pmap)
        if scheduling is Scheduling.ROUND_ROBIN:
            slot = schedule_next(
                scheduling, n_workers=len(farm._slots), previous=self.rr_previous
            )
            self.rr_previous = slot
            return slot
        while True:
            occupancies = [w.inbox.qsize() for w in farm._slots]
            slot = schedule_next(
                scheduling,
                occupancies=occupancies,
                capacity=farm.config.queue_capacity,
            )
            if slot is not None:
                return slot
            if self.farm._abort.is_set():
                return None
            time.sleep(0.0005)

    def _dispatch(self, env: StreamEnvelope) -> None:
        farm = self.farm
        if farm._abort.is_set():
            return
        if env.release_us > 0:
            if self._pace_t0 is None:
                self._pace_t0 = time.perf_counter()
            deadline = self._pace_t0 + env.release_us / 1e6
            while True:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    break
                time.sleep(min(remaining, 0.002))
        elif self._pace_t0 is None:
            self._pace_t0 = time.perf_counter()
        slot = self._pick_slot(env)
        if slot is None:
            return
        self._put(farm._slots[slot].inbox, env)
        self.dispatched += 1
        while farm._resize_events and self.dispatched >= farm._resize_events[0][0]:
            _, delta = farm._resize_events.pop(0)
            self._apply_resize(delta)

    def _shutdown_put(self, q: Queue, item: Any) -> None:
        # Best-effort delivery during teardown: a crashed worker no longer
        # drains its queue, so give up after a bounded wait.
        deadline = time.perf_counter() + 5.0
        while time.perf_counter() < deadline:
            try:
                q.put(item, timeout=0.05)
                return
            except Full:
                continue

    def _run(self) -> None:
        farm = self.farm
        try:
            while True:
                self._pump_control()
                try:
                    item = farm._task_inbox.get(timeout=_POLL_S)
                except Empty:
                    continue
                if isinstance(item, _EndOfInput):
                    # Broadcasts issued before input close are already queued
                    # on the control inbox; deliver them before end-of-stream.
                    self._pump_control()
                    break
                self._dispatch(item)
        except BaseException as exc:  # noqa: BLE001
            farm._record_error(f"emitter: {exc!r}")
        finally:
            for worker in farm._slots:
                if not worker.eos_sent:
                    self._shutdown_put(worker.inbox, _Eos())
                    worker.eos_sent = True
            while True:
                msg = farm._control_inbox.get()
                if isinstance(msg, _EmitterStop):
                    return
                if isinstance(msg, (_Resize, _Merge)):
                    msg.error.append(FarmStateError("farm input already closed"))
                    msg.ack.set()
                # feedback after end-of-stream has no remaining receivers


class _Collector:
    def __init__(self, farm: "FarmHandle"):
        self.farm = farm
        self.thread = threading.Thread(target=self._run, name="farm-collector", daemon=True)
        self.done_count = 0
        self._reorder: dict[int, Any] = {}
        self._next_out = 0

    def _emit(self, value: Any) -> None:
        self.farm.outputs.append(value)

    def _emit_result(self, seq: int, value: Any) -> None:
        if not self.farm.config.preserve_order:
            self._emit(value)
            return
        self._reorder[seq] = value
        while self._next_out in self._reorder:
            self._emit(self._reorder.pop(self._next_out))
            self._next_out += 1

    def _broadcast(self, value: Any) -> None:
        if self.farm.config.feedback_enabled:
            self.farm._control_inbox.put(_FeedbackUpdate(value))

    def _run(self) -> None:
        farm = self.farm
        behavior = farm.behavior
        try:
            while True:
                with farm._lock:
                    started = farm._workers_started
                if self.done_count >= started:
                    break
                try:
                    msg = farm._out_queue.get(timeout=_POLL_S)
                except Empty:
                    continue
                if isinstance(msg, _WorkerDone):
                    self.done_count += 1
                elif isinstance(msg, _Result):
                    self._emit_result(msg.seq, msg.value)
                elif isinstance(msg, _ErrorResultMsg):
                    self._emit_result(msg.seq, ErrorResult(msg.seq, msg.message))
                else:
                    behavior.collector_msg(msg, self._emit, self._broadcast)
        except BaseException as exc:  # noqa: BLE001
            farm._record_error(f"collector: {exc!r}")
        finally:
            farm._t_end = time.perf_counter()


# ---------------------------------------------------------------------------
# Farm handle and module-level operations


class FarmHandle:
    """Handle to a farm: feed input, drain output, control lifecycle and size."""

    def __init__(self, config: FarmConfig, spec: PatternSpec):
        _validate(config, spec)
        self.config = config
        self.spec = spec
        self._abort = threading.Event()
        self._lock = threading.Lock()
        self.behavior = _make_behavior(spec, config, self._abort)
        self._task_inbox: Queue = Queue(maxsize=config.queue_capacity)
        self._control_inbox: Queue = Queue()
        self._out_queue: Queue = Queue(maxsize=config.queue_capacity)
        self.outputs: list[Any] = []
        self._metrics = RunMetrics()
        self._workers_started = 0
        self._next_worker_id = 0
        self.workers: list[_Worker] = []
        self._slots: list[_Worker] = []
        self._pmap: Optional[PartitionMap] = None
        self._resize_events: list[tuple[int, int]] = []
        self._state = "built"
        self._seq = 0
        self._t_feed0: Optional[float] = None
        self._t_end: Optional[float] = None

        if isinstance(spec, PartitionedSpec):
            self._pmap = PartitionMap(spec.n_partitions, config.n_workers)
        for _ in range(config.n_workers):
            self._spawn_worker(start_thread=False)
        self._emitter = _Emitter(self)
        self._collector = _Collector(self)

    # -- construction internals

    _UNSET = object()

    def _spawn_worker(self, start_thread: bool = True, local: Any = _UNSET) -> _Worker:
        worker = _Worker(self, self._next_worker_id)
        self._next_worker_id += 1
        if local is not FarmHandle._UNSET:
            worker.local = local
        if self._pmap is not None:
            behavior = self.behavior
            if len(self._slots) < self._pmap.n_workers:
                behavior.init_partitions(worker, self._pmap.owned_by(len(self._slots)))
        with self._lock:
            self._workers_started += 1
        self.workers.append(worker)
        self._slots.append(worker)
        if start_thread:
            worker.thread.start()
        return worker

    def _record_error(self, message: str) -> None:
        with self._lock:
            self._metrics.errors.append(message)
        self._abort.set()

    # -- lifecycle

    @property
    def worker_count(self) -> int:
        return len(self._slots)

    @property
    def running(self) -> bool:
        return self._state == "running"

    def schedule_resize(self, at_task_count: int, delta: int) -> None:
        """Register a worker-count change applied after dispatching N tasks."""
        if self._state != "built":
            raise FarmStateError("resize events must be scheduled before start")
        self._resize_events.append((at_task_count, delta))
        self._resize_events.sort()

    def start(self) -> None:
        if self._state != "built":
            raise FarmStateError(f"cannot start a farm in state {self._state!r}")
        self._state = "running"
        for worker in self.workers:
            worker.thread.start()
        self._collector.thread.start()
        self._emitter.thread.start()

    def feed(self, task: Any) -> None:
        if self._state != "running":
            raise FarmStateError("farm is not running")
        env = StreamEnvelope(
            seq=self._seq, payload=task, release_us=float(getattr(task, "release_us", 0.0))
        )
        self._seq += 1
        if self._t_feed0 is None:
            self._t_feed0 = time.perf_counter()
        self._task_inbox.put(env)
        self._metrics.tasks_fed += 1

    def finish(self) -> tuple[list[Any], RunMetrics]:
        if self._state != "running":
            raise FarmStateError("farm is not running")
        if self._t_feed0 is None:
            self._t_feed0 = time.perf_counter()
        self._task_inbox.put(_EndOfInput())
        self._collector.thread.join()
        self._control_inbox.put(_EmitterStop())
        self._emitter.thread.join()
        for worker in self.workers:
            worker.thread.join()
        self._state = "finished"
        m = self._metrics
        m.completion_us = (self._t_end - self._t_feed0) * 1e6
        m.outputs_drained = len(self.outputs)
        m.worker_task_counts = {w.worker_id: w.task_count for w in self.workers}
        m.tasks_processed = sum(m.worker_task_counts.values())
        if m.errors:
            raise FarmRuntimeError("; ".join(m.errors), metrics=m)
        return self.outputs, m

    def run(self, tasks) -> tuple[list[Any], RunMetrics]:
        if self._state != "built":
            raise FarmStateError("farm already run")
        self.start()
        for task in tasks:
            self.feed(task)
        return self.finish()

    def abort(self) -> None:
        self._record_error("aborted by controller")

    # -- adaptivity and feedback control surface

    def _control_request(self, msg) -> None:
        if self._state != "running":
            raise FarmStateError("farm is not running")
        self._control_inbox.put(msg)
        msg.ack.wait()
        if msg.error:
            raise msg.error[0]

    def resize(self, delta: int) -> None:
        self._control_request(_Resize(delta, threading.Event()))

    def merge_workers(self, survivor: int, retired: int) -> None:
        if not isinstance(self.spec, AccumulatorSpec):
            raise FarmStateError("merge_workers is only defined for the accumulator pattern")
        self._control_request(_Merge(survivor, retired, threading.Event()))

    def feedback_broadcast(self, update: Any) -> None:
        if not self.config.feedback_enabled:
            raise FarmStateError("feedback channel is not enabled")
        if self._state != "running":
            raise FarmStateError("farm is not running")
        self._control_inbox.put(_FeedbackUpdate(update))

    @property
    def final_state(self) -> Any:
        return self.behavior.final_state()

    @property
    def metrics(self) -> RunMetrics:
        return self._metrics

    def processed_log(self) -> dict[int, list[int]]:
        """Per-worker list of processed task seqs (test introspection)."""
        return {w.worker_id: list(w.processed_seqs) for w in self.workers}


def _validate(config: FarmConfig, spec: PatternSpec) -> None:
    if config.n_workers < 1:
        raise FarmConfigError("n_workers must be >= 1")
    if config.queue_capacity < 1:
        raise FarmConfigError("queue_capacity must be >= 1")
    if config.feedback_enabled and not config.collector_enabled:
        raise FarmConfigError("feedback channel requires the collector")
    if config.preserve_order and not config.collector_enabled:
        raise FarmConfigError("order preservation requires the collector")
    if isinstance(spec, PartitionedSpec):
        if config.scheduling is not Scheduling.KEY_DIRECTED:
            raise FarmConfigError("partitioned pattern requires KeyDirected scheduling")
        if config.n_workers > spec.n_partitions:
            raise FarmConfigError(
                f"partitioned pattern needs n_workers <= {spec.n_partitions} partitions"
            )
        if not config.collector_enabled:
            raise FarmConfigError("partitioned pattern requires the collector")
    elif config.scheduling is Scheduling.KEY_DIRECTED:
        raise FarmConfigError("KeyDirected scheduling requires the partitioned pattern")
    if isinstance(spec, AccumulatorSpec) and not config.collector_enabled:
        raise FarmConfigError("accumulator pattern requires the collector")
    if isinstance(spec, ApproxSpec):
        if not (config.collector_enabled and config.feedback_enabled):
            raise FarmConfigError("approx pattern requires collector and feedback channel")


def farm_config_for(spec: PatternSpec, n_workers: int, **overrides) -> FarmConfig:
    """Build a FarmConfig with the defaults each pattern variant needs."""
    defaults: dict[str, Any] = {"n_workers": n_workers}
    if spec.variant is Variant.SERIAL:
        defaults["preserve_order"] = True
    elif spec.variant is Variant.PARTITIONED:
        defaults["scheduling"] = Scheduling.KEY_DIRECTED
    elif spec.variant is Variant.APPROX:
        defaults["feedback_enabled"] = True
    defaults.update(overrides)
    return FarmConfig(**defaults)


def build_farm(config: FarmConfig, spec: PatternSpec) -> FarmHandle:
    """Create all farm activities, idle and waiting for input."""
    return FarmHandle(config, spec)


def run_to_completion(farm: FarmHandle, tasks) -> tuple[list[Any], RunMetrics]:
    """Feed a finite task sequence, wait for drain, return outputs and metrics."""
    return farm.run(tasks)


def feedback_broadcast(farm: FarmHandle, update: Any) -> None:
    """Broadcast a state update to every active worker via the feedback path."""
    farm.feedback_broadcast(update)
