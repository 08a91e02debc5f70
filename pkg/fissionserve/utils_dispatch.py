import enum
import logging
import threading

from dataclasses import dataclass, field

from fissionserve.utils_errors import (
    DispatchError,
    DispatchTimeout,
    FissionError,
    UpstreamFailure,
)
from fissionserve.utils_executor import COMPUTED, RECEIVED, RUNNING
from fissionserve.utils_graph import topo_order
from fissionserve.utils_record import CLIENT_INPUT, DataRef

logger = logging.getLogger("FissionServe")


class NodeStatus(str, enum.Enum):
    DISPATCHED = "Dispatched"
    RUNNING = "Running"
    COMPLETE = "Complete"
    FAILED = "Failed"


TERMINAL = (NodeStatus.COMPLETE, NodeStatus.FAILED)


@dataclass(eq=False)
class ReplicaEndpoint:
    replica_id: str
    task_digest: str
    gpu_ids: list
    node_id: str
    sidecar_address: str
    executor: object = None
    outstanding: int = 0
    dispatched: int = 0

    def to_dict(self):
        return {
            "replica_id": self.replica_id,
            "gpu_ids": list(self.gpu_ids),
            "node_id": self.node_id,
            "sidecar_address": self.sidecar_address,
            "outstanding": self.outstanding,
            "dispatched": self.dispatched,
        }


# ---------------------------------------------------------------------------
# Replica selection
# ---------------------------------------------------------------------------


class LeastOutstanding:
    """Fewest outstanding invocations wins; ties rotate round-robin per task."""

    name = "least_outstanding"

    def __init__(self):
        self._cursor = {}

    def candidates(self, replicas, hint=None):
        low = min(replica.outstanding for replica in replicas)
        return [i for i, replica in enumerate(replicas) if replica.outstanding == low]

    def choose(self, digest, replicas, hint=None):
        candidates = self.candidates(replicas, hint)
        start = self._cursor.get(digest, 0) % len(replicas)
        pick = next((i for i in candidates if i >= start), candidates[0])
        self._cursor[digest] = (pick + 1) % len(replicas)
        return pick


class LocalityAware(LeastOutstanding):
    """Among the least loaded replicas, prefer the producer's node."""

    name = "locality"

    def candidates(self, replicas, hint=None):
        candidates = super().candidates(replicas, hint)
        if hint is None:
            return candidates
        local = [i for i in candidates if replicas[i].node_id == hint]
        return local or candidates


POLICIES = {policy.name: policy for policy in (LeastOutstanding, LocalityAware)}


def select_replica(digest, replicas, policy=None, hint=None):
    if not replicas:
        raise DispatchError(f"no live replica for task {digest[:12]}")
    policy = policy or LeastOutstanding()
    return replicas[policy.choose(digest, replicas, hint)]


# ---------------------------------------------------------------------------
# Result streams
# ---------------------------------------------------------------------------


class ResultStream:
    """Chunks of one invocation output, pushed by executors, read by replay.

    ``pump`` advances a clock nobody else drives; without it readers wait on
    the condition variable.
    """

    def __init__(self, invocation_id, output_index, ref_id, pump=None, timeout=None):
        self.invocation_id = invocation_id
        self.output_index = output_index
        self.ref_id = ref_id
        self.pump = pump
        self.timeout = timeout
        self.chunks = []
        self.done = False
        self.error = None
        self._listeners = []
        self._cond = threading.Condition()

    def __repr__(self):
        state = "failed" if self.error else ("done" if self.done else "open")
        return f"ResultStream({self.invocation_id}[{self.output_index}], {len(self.chunks)} chunks, {state})"

    @property
    def finished(self):
        return self.done or self.error is not None

    def push(self, chunk):
        with self._cond:
            if self.finished:
                return
            self.chunks.append(chunk)
            listeners = list(self._listeners)
            self._cond.notify_all()
        for on_chunk, _ in listeners:
            on_chunk(chunk)

    def _finish(self, error=None):
        with self._cond:
            if self.finished:
                return
            if error is None:
                self.done = True
            else:
                self.error = error
            listeners = list(self._listeners)
            self._cond.notify_all()
        for _, on_end in listeners:
            on_end(error)

    def end(self):
        self._finish()

    def fail(self, error):
        self._finish(error)

    def add_listener(self, on_chunk, on_end):
        with self._cond:
            backlog = list(self.chunks)
            finished, error = self.finished, self.error
            self._listeners.append((on_chunk, on_end))
        for chunk in backlog:
            on_chunk(chunk)
        if finished:
            on_end(error)

    def __iter__(self):
        index = 0
        while True:
            with self._cond:
                while index >= len(self.chunks) and not self.finished:
                    if self.pump is not None:
                        self._cond.release()
                        try:
                            progressed = self.pump()
                        finally:
                            self._cond.acquire()
                        if not progressed and index >= len(self.chunks) and not self.finished:
                            raise DispatchError(f"{self.invocation_id} stalled with no pending events")
                    elif not self._cond.wait(timeout=self.timeout):
                        raise DispatchTimeout(f"no data from {self.invocation_id} within {self.timeout}s")
                if index < len(self.chunks):
                    chunk = self.chunks[index]
                elif self.error is not None:
                    raise self.error
                else:
                    return
            index += 1
            yield chunk

    def result(self):
        return list(self)


# ---------------------------------------------------------------------------
# Dispatch records
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DispatchRecord:
    request_id: str
    graph: object
    assignments: dict = field(default_factory=dict)
    statuses: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)
    streams: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    transfer_ms: dict = field(default_factory=dict)
    send_counts: dict = field(default_factory=dict)
    dispatched_at: float = 0.0
    finished_at: float = None

    def __post_init__(self):
        self._released = set()
        self._callbacks = []

    @property
    def done(self):
        return all(status in TERMINAL for status in self.statuses.values())

    @property
    def failed(self):
        return bool(self.errors)

    def first_error(self):
        """The error of the node that failed first, not its cancelled descendants."""
        for error in self.errors.values():
            if not isinstance(error, UpstreamFailure):
                return error
        return next(iter(self.errors.values()), None)

    def add_done_callback(self, fn):
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def stamp(self, invocation_id, event, at):
        self.timestamps.setdefault(invocation_id, {}).setdefault(event, at)

    def to_dict(self):
        return {
            "request_id": self.request_id,
            "assignments": {k: v.replica_id for k, v in self.assignments.items()},
            "statuses": {k: v.value for k, v in self.statuses.items()},
            "timestamps": self.timestamps,
            "transfer_ms": self.transfer_ms,
            "errors": {k: v.to_dict() for k, v in self.errors.items()},
            "dispatched_at": self.dispatched_at,
            "finished_at": self.finished_at,
        }


class _NodeSink:
    """Receives one executor's reports for one invocation."""

    def __init__(self, dispatcher, record, invocation_id):
        self.dispatcher = dispatcher
        self.record = record
        self.invocation_id = invocation_id

    def status(self, invocation_id, status, at):
        record = self.record
        with self.dispatcher._lock:
            if status == RECEIVED:
                record.stamp(invocation_id, "queue_enter", at)
            elif status == RUNNING:
                record.stamp(invocation_id, "compute_start", at)
                if record.statuses[invocation_id] is NodeStatus.DISPATCHED:
                    record.statuses[invocation_id] = NodeStatus.RUNNING
            elif status == COMPUTED:
                record.stamp(invocation_id, "compute_end", at)

    def chunk(self, invocation_id, output_index, chunk):
        self.record.streams[invocation_id][output_index].push(chunk)

    def output_done(self, invocation_id, output_index):
        self.record.streams[invocation_id][output_index].end()

    def complete(self, invocation_id, info=None):
        self.dispatcher._complete(self.record, invocation_id, info or {})

    def fail(self, invocation_id, error):
        self.dispatcher._fail(self.record, invocation_id, error)


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------


class TaskDispatcher:
    def __init__(self, clock, policy=None, dispatch_timeout_ms=None, stream_timeout_s=None):
        self.clock = clock
        self.policy = policy or LeastOutstanding()
        self.dispatch_timeout_ms = dispatch_timeout_ms
        self.stream_timeout_s = stream_timeout_s
        self.endpoints = {}
        self.records = {}
        self.sent = 0
        self._lock = threading.RLock()

    def register_replica(self, endpoint):
        with self._lock:
            self.endpoints.setdefault(endpoint.task_digest, []).append(endpoint)

    def unregister_replicas(self, digest):
        with self._lock:
            return self.endpoints.pop(digest, [])

    def replicas(self, digest):
        with self._lock:
            return list(self.endpoints.get(digest, []))

    def _pump(self):
        return None if self.clock.driven else self.clock.step

    def dispatch(self, graph, on_done=None):
        """Assign every node to a replica and send all of them at once.

        ``on_done(record)`` runs once every node is terminal.
        """
        with self._lock:
            missing = sorted(
                {node.task_digest for node in graph.nodes.values() if not self.endpoints.get(node.task_digest)}
            )
            if missing:
                labels = sorted({n.label for n in graph.nodes.values() if n.task_digest in missing})
                raise DispatchError(
                    f"no live replica for {', '.join(labels)} ({', '.join(d[:12] for d in missing)})"
                )
            record = DispatchRecord(request_id=graph.request_id, graph=graph, dispatched_at=self.clock.now)
            if on_done is not None:
                record._callbacks.append(on_done)
            order = topo_order(graph)
            for invocation_id in order:
                node = graph.nodes[invocation_id]
                producers = graph.producers(invocation_id)
                hint = record.assignments[producers[0]].node_id if producers else None
                endpoint = select_replica(node.task_digest, self.endpoints[node.task_digest], self.policy, hint)
                endpoint.outstanding += 1
                endpoint.dispatched += 1
                record.assignments[invocation_id] = endpoint
                record.statuses[invocation_id] = NodeStatus.DISPATCHED
                record.streams[invocation_id] = [
                    ResultStream(invocation_id, i, ref.ref_id, pump=self._pump(), timeout=self.stream_timeout_s)
                    for i, ref in enumerate(node.outputs)
                ]
            messages = [(invocation_id, self._message(graph, record, invocation_id)) for invocation_id in order]
            self.records[record.request_id] = record
        self.clock.post(self._send_all, record, messages)
        logger.debug("Dispatching %d invocations for %s", len(messages), graph.request_id)
        return record

    def _message(self, graph, record, invocation_id):
        node = graph.nodes[invocation_id]
        inputs, sources = [], []
        for value in node.inputs:
            if isinstance(value, DataRef):
                inputs.append({"ref": value.to_dict()})
                if value.producer == CLIENT_INPUT:
                    sources.append(None)
                else:
                    sources.append(record.assignments[value.producer].sidecar_address)
            else:
                inputs.append({"literal": value})
                sources.append(None)
        dests = [[] for _ in node.outputs]
        for edge in graph.edges:
            if edge.producer != invocation_id:
                continue
            address = record.assignments[edge.consumer].sidecar_address
            if address not in dests[edge.output_index]:
                dests[edge.output_index].append(address)
        return {
            "type": "dispatch",
            "request_id": graph.request_id,
            "invocation_id": invocation_id,
            "task_digest": node.task_digest,
            "label": node.label,
            "inputs": inputs,
            "input_sources": sources,
            "output_refs": [ref.to_dict() for ref in node.outputs],
            "output_dests": dests,
            "streaming": node.streaming,
        }

    def _send_all(self, record, messages):
        for invocation_id, message in messages:
            if record.statuses[invocation_id] in TERMINAL:
                continue
            endpoint = record.assignments[invocation_id]
            record.send_counts[invocation_id] = record.send_counts.get(invocation_id, 0) + 1
            record.stamp(invocation_id, "dispatch", self.clock.now)
            self.sent += 1
            try:
                endpoint.executor.submit(message, _NodeSink(self, record, invocation_id))
            except FissionError as err:
                self._fail(record, invocation_id, err)
            except OSError as err:
                self._fail(record, invocation_id, DispatchError(f"{endpoint.replica_id} unreachable: {err}"))
        if self.dispatch_timeout_ms:
            self.clock.call_later(self.dispatch_timeout_ms, self._check_timeout, record)

    def _check_timeout(self, record):
        for invocation_id, status in sorted(record.statuses.items()):
            if status not in TERMINAL:
                self._fail(
                    record,
                    invocation_id,
                    DispatchTimeout(f"{invocation_id} did not finish within {self.dispatch_timeout_ms} ms"),
                )

    def _release(self, record, invocation_id):
        if invocation_id in record._released:
            return
        record._released.add(invocation_id)
        record.assignments[invocation_id].outstanding -= 1

    def _complete(self, record, invocation_id, info):
        with self._lock:
            if record.statuses.get(invocation_id) in TERMINAL:
                return
            record.statuses[invocation_id] = NodeStatus.COMPLETE
            record.transfer_ms[invocation_id] = float(info.get("transfer_ms", 0.0))
            record.stamp(invocation_id, "complete", self.clock.now)
            self._release(record, invocation_id)
        for stream in record.streams[invocation_id]:
            stream.end()
        self._maybe_done(record)

    def _fail(self, record, invocation_id, error):
        with self._lock:
            if record.statuses.get(invocation_id) in TERMINAL:
                return
            if not isinstance(error, FissionError):
                error = DispatchError(str(error))
            record.statuses[invocation_id] = NodeStatus.FAILED
            record.errors[invocation_id] = error
            record.stamp(invocation_id, "failed", self.clock.now)
            self._release(record, invocation_id)
            cancelled = []
            for descendant in sorted(record.graph.descendants(invocation_id)):
                if record.statuses[descendant] in TERMINAL:
                    continue
                label = record.graph.nodes[invocation_id].label
                cause = error.origin if isinstance(error, UpstreamFailure) else invocation_id
                record.statuses[descendant] = NodeStatus.FAILED
                record.errors[descendant] = UpstreamFailure(
                    f"cancelled because {label} ({cause}) failed: {error.message}",
                    invocation_id=descendant,
                    origin=cause,
                    cause_code=getattr(error, "cause_code", None) or error.code,
                )
                record.stamp(descendant, "failed", self.clock.now)
                self._release(record, descendant)
                cancelled.append(descendant)
        logger.error("%s/%s failed: %s", record.request_id, invocation_id, error.message)
        if isinstance(error, DispatchTimeout):
            record.assignments[invocation_id].executor.cancel(record.request_id, invocation_id)
        for stream in record.streams[invocation_id]:
            stream.fail(error)
        for descendant in cancelled:
            record.assignments[descendant].executor.cancel(record.request_id, descendant)
            for stream in record.streams[descendant]:
                stream.fail(record.errors[descendant])
        self._maybe_done(record)

    def _maybe_done(self, record):
        with self._lock:
            if not record.done or record.finished_at is not None:
                return
            record.finished_at = self.clock.now
            self.records.pop(record.request_id, None)
            callbacks, record._callbacks = record._callbacks, []
        for fn in callbacks:
            fn(record)

    def collect(self, record, invocation_id):
        """Result streams of one invocation: one stream, or a tuple of them."""
        streams = record.streams.get(invocation_id)
        if streams is None:
            raise DispatchError(f"{invocation_id} was not dispatched for {record.request_id}")
        return streams[0] if len(streams) == 1 else tuple(streams)

    def results(self, record):
        """Per-invocation result lists, the shape replay expects."""
        return {invocation_id: list(streams) for invocation_id, streams in record.streams.items()}

    def stats(self):
        with self._lock:
            return {
                "sent": self.sent,
                "in_flight_requests": len(self.records),
                "policy": self.policy.name,
                "replicas": {
                    digest: [endpoint.to_dict() for endpoint in endpoints]
                    for digest, endpoints in self.endpoints.items()
                },
            }
