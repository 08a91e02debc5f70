import enum
import json
import time
import zlib
import hashlib
import logging
import threading

from pathlib import Path
from collections import deque, namedtuple
from dataclasses import dataclass, field
from multiprocessing import shared_memory

import numpy as np

from fissionserve.utils_errors import (
    BackpressureTimeout,
    FissionError,
    IntegrityError,
    ProducerFailed,
    ProtocolError,
    UnknownGpuError,
)
from fissionserve.utils_wire import FrameConnection

logger = logging.getLogger("FissionServe")

DEFAULT_CHUNK_BYTES = 256 * 1024
MB = 1_000_000


class Transport(str, enum.Enum):
    LOCAL_BUFFER = "LocalBuffer"
    NETWORK_STREAM = "NetworkStream"


@dataclass
class TransferCost:
    """Latency charged per transfer in simulated time."""

    local_base_ms: float = 1.0
    copy_ms_per_mb: float = 0.75
    network_base_ms: float = 1.5
    network_gbps: float = 400.0

    def transfer_ms(self, nbytes, transport):
        copy = self.copy_ms_per_mb * nbytes / MB
        if Transport(transport) is Transport.LOCAL_BUFFER:
            return self.local_base_ms + copy
        wire = nbytes * 8 / (self.network_gbps * 1e9) * 1000.0
        return self.network_base_ms + copy + wire

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: float(v) for k, v in (data or {}).items()})


# ---------------------------------------------------------------------------
# Topology and routing
# ---------------------------------------------------------------------------


def local_address(gpu_id):
    return f"local://gpu{gpu_id}"


def tcp_address(host, port):
    return f"tcp://{host}:{port}"


@dataclass
class Topology:
    nodes: dict
    addresses: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = {int(gpu): node for gpu, node in self.nodes.items()}
        for gpu in self.nodes:
            self.addresses.setdefault(gpu, local_address(gpu))
        self._by_address = {addr: gpu for gpu, addr in self.addresses.items()}

    @classmethod
    def load(cls, path):
        """Topology map file: JSON ``{gpu_id: node_id}``."""
        data = json.loads(Path(path).read_text())
        return cls(nodes=data)

    def node_of(self, gpu_id):
        try:
            return self.nodes[gpu_id]
        except KeyError:
            raise UnknownGpuError(f"GPU {gpu_id} is not in the topology map") from None

    def address_of(self, gpu_id):
        self.node_of(gpu_id)
        return self.addresses[gpu_id]

    def set_address(self, gpu_id, address):
        self.node_of(gpu_id)
        self._by_address.pop(self.addresses.get(gpu_id), None)
        self.addresses[gpu_id] = address
        self._by_address[address] = gpu_id

    def gpu_at(self, address):
        try:
            return self._by_address[address]
        except KeyError:
            raise UnknownGpuError(f"no sidecar at {address}") from None

    def to_dict(self):
        return {
            "nodes": {str(k): v for k, v in self.nodes.items()},
            "addresses": {str(k): v for k, v in self.addresses.items()},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            nodes=data["nodes"],
            addresses={int(k): v for k, v in data.get("addresses", {}).items()},
        )


def route(topology, src_gpu, dst_gpu):
    if topology.node_of(src_gpu) == topology.node_of(dst_gpu):
        return Transport.LOCAL_BUFFER
    return Transport.NETWORK_STREAM


# ---------------------------------------------------------------------------
# Shared buffer arena
# ---------------------------------------------------------------------------


class NodeArena:
    """One shared memory block per node, carved into per-sidecar slices."""

    def __init__(self, node_id, capacity_bytes, name=None, create=True):
        if capacity_bytes <= 0:
            raise ValueError("arena capacity must be positive")
        self.node_id = node_id
        self.capacity_bytes = int(capacity_bytes)
        self.owner = create
        self.shm = shared_memory.SharedMemory(name=name, create=create, size=self.capacity_bytes)
        if not create:
            _untrack(self.shm)
        self.array = np.ndarray((self.capacity_bytes,), dtype=np.uint8, buffer=self.shm.buf)

    @property
    def name(self):
        return self.shm.name

    def slice(self, index, count, **kwargs):
        size = self.capacity_bytes // count
        return BufferArena(self, index * size, size, **kwargs)

    def close(self):
        if self.array is None:
            return
        self.array = None
        try:
            self.shm.close()
            if self.owner:
                self.shm.unlink()
        except (BufferError, FileNotFoundError) as err:
            logger.warning("Arena %s on %s not released cleanly: %s", self.name, self.node_id, err)


def _untrack(shm):
    # attaching processes must not unlink the block when they exit
    try:
        from multiprocessing import resource_tracker

        resource_tracker.unregister(shm._name, "shared_memory")
    except Exception:
        pass


@dataclass
class Segment:
    offset: int
    size: int
    refs: int = 1
    created: float = field(default_factory=time.monotonic)


class BufferArena:
    """First-fit allocator over one slice of a NodeArena.

    Segments are refcounted and freed when every receiver acknowledged its
    read. Allocation blocks while the slice is full.
    """

    def __init__(self, node_arena, base, size, backpressure_timeout=30.0, orphan_timeout=60.0):
        self.node_arena = node_arena
        self.base = base
        self.size = size
        self.backpressure_timeout = backpressure_timeout
        self.orphan_timeout = orphan_timeout
        self._free = [(base, size)]
        self._segments = {}
        self._cond = threading.Condition()
        self.peak_bytes = 0

    @property
    def node_id(self):
        return self.node_arena.node_id

    @property
    def capacity_bytes(self):
        return self.size

    @property
    def segments(self):
        with self._cond:
            return len(self._segments)

    @property
    def in_use_bytes(self):
        with self._cond:
            return sum(seg.size for seg in self._segments.values())

    def _first_fit(self, nbytes):
        for index, (offset, length) in enumerate(self._free):
            if length >= nbytes:
                if length == nbytes:
                    del self._free[index]
                else:
                    self._free[index] = (offset + nbytes, length - nbytes)
                return offset
        return None

    def allocate(self, nbytes, refs=1, timeout=None):
        if nbytes <= 0:
            raise ValueError("segments must be at least one byte")
        if nbytes > self.size:
            raise BackpressureTimeout(
                f"payload of {nbytes} bytes can never fit arena slice of {self.size} bytes"
            )
        timeout = self.backpressure_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                offset = self._first_fit(nbytes)
                if offset is not None:
                    segment = Segment(offset, nbytes, refs)
                    self._segments[offset] = segment
                    in_use = sum(seg.size for seg in self._segments.values())
                    self.peak_bytes = max(self.peak_bytes, in_use)
                    return segment
                if self.reap_orphans(locked=True):
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise BackpressureTimeout(
                        f"arena on {self.node_id} full for {timeout:.1f}s "
                        f"({self.in_use_unlocked()} of {self.size} bytes in use)"
                    )
                self._cond.wait(timeout=min(remaining, 0.5))

    def in_use_unlocked(self):
        return sum(seg.size for seg in self._segments.values())

    def write(self, segment, payload):
        view = np.frombuffer(payload, dtype=np.uint8)
        self.node_arena.array[segment.offset : segment.offset + segment.size] = view

    def read(self, offset, size):
        return self.node_arena.array[offset : offset + size].tobytes()

    def _free_range(self, offset, size):
        self._free.append((offset, size))
        self._free.sort()
        merged = []
        for start, length in self._free:
            if merged and merged[-1][0] + merged[-1][1] == start:
                merged[-1] = (merged[-1][0], merged[-1][1] + length)
            else:
                merged.append((start, length))
        self._free = merged

    def release(self, offset):
        with self._cond:
            segment = self._segments.get(offset)
            if segment is None:
                logger.debug("Release of unknown segment at %d ignored", offset)
                return False
            segment.refs -= 1
            if segment.refs > 0:
                return False
            del self._segments[offset]
            self._free_range(segment.offset, segment.size)
            self._cond.notify_all()
            return True

    def reap_orphans(self, max_age=None, locked=False):
        """Free segments whose receivers never acknowledged them."""
        max_age = self.orphan_timeout if max_age is None else max_age
        if not locked:
            with self._cond:
                return self.reap_orphans(max_age, locked=True)
        now = time.monotonic()
        stale = [seg for seg in self._segments.values() if now - seg.created >= max_age]
        for segment in stale:
            logger.warning(
                "Reaping orphaned arena segment %d (%d bytes) on %s after %.1fs",
                segment.offset,
                segment.size,
                self.node_id,
                now - segment.created,
            )
            del self._segments[segment.offset]
            self._free_range(segment.offset, segment.size)
        if stale:
            self._cond.notify_all()
        return len(stale)


# ---------------------------------------------------------------------------
# Frame delivery between sidecars
# ---------------------------------------------------------------------------


class FrameRouter:
    """Delivers frames to sidecar addresses, in process or over TCP."""

    def __init__(self):
        self._local = {}
        self._remote = {}
        self._lock = threading.Lock()

    def register(self, sidecar):
        self._local[sidecar.address] = sidecar

    def unregister(self, sidecar):
        self._local.pop(sidecar.address, None)

    def deliver(self, address, header, body=b""):
        sidecar = self._local.get(address)
        if sidecar is not None:
            sidecar.handle_frame(header, body)
            return
        if not address.startswith("tcp://"):
            raise ProtocolError(f"sidecar {address} is unreachable")
        self._connection(address).send(header, body)

    def _connection(self, address):
        with self._lock:
            conn = self._remote.get(address)
            if conn is not None and not conn.closed:
                return conn
            host, port = address[len("tcp://") :].rsplit(":", 1)
            try:
                conn = FrameConnection.connect(host, int(port), name=f"to-{address}")
            except OSError as err:
                raise ProtocolError(f"sidecar {address} is unreachable: {err}") from None
            self._remote[address] = conn
            return conn

    def close(self):
        with self._lock:
            for conn in self._remote.values():
                conn.close()
            self._remote.clear()


# ---------------------------------------------------------------------------
# Sidecar
# ---------------------------------------------------------------------------

Chunk = namedtuple("Chunk", ["seq", "nbytes", "final", "meta", "data"])


def checksum(payload):
    return zlib.crc32(payload) & 0xFFFFFFFF


class _Inbox:
    def __init__(self):
        self.pending = {}
        self.ready = deque()
        self.next_seq = 0
        self.done = False
        self.error = None
        self.listeners = []
        self.reading = False


def _immediate(fn, *args):
    fn(*args)


class Sidecar:
    def __init__(
        self,
        gpu_id,
        topology,
        router,
        arena=None,
        chunk_bytes=DEFAULT_CHUNK_BYTES,
        callback_runner=None,
    ):
        self.gpu_id = gpu_id
        self.topology = topology
        self.node_id = topology.node_of(gpu_id)
        self.router = router
        self.arena = arena
        self.chunk_bytes = chunk_bytes
        self.run_callback = callback_runner or _immediate
        self._cond = threading.Condition()
        self._inboxes = {}
        self._forgotten = set()
        self._sent_seq = {}
        self.stats = {
            "sent": 0,
            "received": 0,
            "bytes_sent": 0,
            "bytes_received": 0,
            "acks": 0,
            "integrity_errors": 0,
        }
        router.register(self)

    @property
    def address(self):
        return self.topology.address_of(self.gpu_id)

    def __repr__(self):
        return f"Sidecar(gpu{self.gpu_id}@{self.node_id})"

    # -- sending ------------------------------------------------------------

    def _next_seq(self, ref_id, dest_gpu, seq, final):
        # one stream per (ref, consumer); every consumer sees the same seq numbers
        key = (ref_id, dest_gpu)
        with self._cond:
            last = self._sent_seq.get(key, -1)
            if seq <= last:
                raise ProtocolError(f"{ref_id}: seq {seq} not after {last} for gpu{dest_gpu}")
            if final:
                self._sent_seq.pop(key, None)
            else:
                self._sent_seq[key] = seq

    def send(
        self,
        ref_id,
        payload,
        dest_gpu,
        seq=0,
        final=True,
        request_id="",
        nbytes=None,
        meta=None,
        expected_bytes=None,
    ):
        """Forward one chunk of ``ref_id`` to the sidecar of ``dest_gpu``.

        ``payload=None`` sends an envelope describing ``nbytes`` of simulated
        data without moving any bytes.
        """
        if payload is not None:
            payload = bytes(payload)
            if expected_bytes is not None and len(payload) != expected_bytes:
                raise ProtocolError(
                    f"{ref_id}: payload is {len(payload)} bytes, descriptor says {expected_bytes}"
                )
            nbytes = len(payload)
        nbytes = int(nbytes or 0)
        transport = route(self.topology, self.gpu_id, dest_gpu)
        self._next_seq(ref_id, dest_gpu, seq, final)
        header = {
            "type": "envelope",
            "request_id": request_id,
            "ref_id": ref_id,
            "seq": seq,
            "total_bytes": nbytes,
            "checksum": checksum(payload) if payload is not None else None,
            "transport": transport.value,
            "location": None,
            "final": final,
            "reply_to": self.address,
            "meta": meta or {},
            "virtual": payload is None,
        }
        body = b""
        segment = None
        if payload:
            if transport is Transport.LOCAL_BUFFER and self.arena is not None:
                segment = self.arena.allocate(len(payload))
                self.arena.write(segment, payload)
                header["location"] = [self.arena.node_arena.name, segment.offset]
            else:
                header["transport"] = Transport.NETWORK_STREAM.value
                header["location"] = f"{self.address}/{ref_id}/{seq}"
                body = payload
        try:
            self.router.deliver(self.topology.address_of(dest_gpu), header, body)
        except (OSError, FissionError):
            if segment is not None:
                self.arena.release(segment.offset)
            raise
        self.stats["sent"] += 1
        self.stats["bytes_sent"] += nbytes
        logger.debug(
            "%s sent %s seq=%d %dB via %s to gpu%s",
            self,
            ref_id,
            seq,
            nbytes,
            header["transport"],
            dest_gpu,
        )

    def send_chunked(self, ref, payload, dest_gpu, request_id=""):
        """Split a whole payload into seq 0..n-1 chunks, final on the last."""
        payload = bytes(payload)
        if len(payload) != ref.total_bytes:
            raise ProtocolError(
                f"{ref.ref_id}: payload is {len(payload)} bytes, descriptor says {ref.total_bytes}"
            )
        step = self.chunk_bytes
        count = max(1, -(-len(payload) // step))
        for seq in range(count):
            part = payload[seq * step : (seq + 1) * step]
            self.send(ref.ref_id, part, dest_gpu, seq=seq, final=seq == count - 1, request_id=request_id)
        return count

    def fail(self, ref_id, dest_gpu, reason):
        """Tell a consumer that the producer of ``ref_id`` failed."""
        header = {"type": "fail", "ref_id": ref_id, "message": str(reason)}
        self.router.deliver(self.topology.address_of(dest_gpu), header)
        with self._cond:
            self._sent_seq.pop((ref_id, dest_gpu), None)

    # -- receiving ----------------------------------------------------------

    def _inbox(self, ref_id):
        inbox = self._inboxes.get(ref_id)
        if inbox is None:
            inbox = self._inboxes[ref_id] = _Inbox()
        return inbox

    def handle_frame(self, header, body=b""):
        kind = header.get("type")
        if kind == "envelope":
            self._on_envelope(header, body)
        elif kind == "ack":
            self.stats["acks"] += 1
            if self.arena is not None:
                self.arena.release(header["offset"])
        elif kind == "fail":
            self._on_fail(header["ref_id"], ProducerFailed(header.get("message", "producer failed")))
        else:
            raise ProtocolError(f"sidecar cannot handle frame type {kind!r}")

    def _read_payload(self, header, body):
        if header.get("virtual"):
            return None
        nbytes = header["total_bytes"]
        if nbytes == 0:
            return b""
        if header["transport"] == Transport.LOCAL_BUFFER.value:
            name, offset = header["location"]
            if self.arena is None or self.arena.node_arena.name != name:
                raise ProtocolError(f"arena {name} is not mapped on {self}")
            data = self.arena.read(offset, nbytes)
            self.router.deliver(
                header["reply_to"],
                {"type": "ack", "ref_id": header["ref_id"], "seq": header["seq"], "offset": offset},
            )
            return data
        if len(body) != nbytes:
            raise ProtocolError(f"{header['ref_id']}: body is {len(body)} bytes, envelope says {nbytes}")
        return body

    def _on_envelope(self, header, body):
        ref_id = header["ref_id"]
        error = None
        try:
            data = self._read_payload(header, body)
            if data is not None and checksum(data) != header["checksum"]:
                self.stats["integrity_errors"] += 1
                error = IntegrityError(f"{ref_id} seq {header['seq']}: checksum mismatch")
        except ProtocolError as err:
            data, error = None, err
        if error is not None:
            logger.error("%s: %s", self, error.message)
            self._on_fail(ref_id, error)
            return
        chunk = Chunk(header["seq"], header["total_bytes"], header["final"], header.get("meta") or {}, data)
        deliveries = []
        with self._cond:
            self.stats["received"] += 1
            self.stats["bytes_received"] += chunk.nbytes
            if ref_id in self._forgotten:
                if chunk.final:
                    self._forgotten.discard(ref_id)
                return
            inbox = self._inbox(ref_id)
            if inbox.done or chunk.seq < inbox.next_seq or chunk.seq in inbox.pending:
                logger.debug("%s dropped duplicate %s seq=%d", self, ref_id, chunk.seq)
                return
            inbox.pending[chunk.seq] = chunk
            while inbox.next_seq in inbox.pending:
                ready = inbox.pending.pop(inbox.next_seq)
                inbox.next_seq += 1
                inbox.ready.append(ready)
                if ready.final:
                    inbox.done = True
                    break
            if inbox.listeners:
                deliveries = list(inbox.ready)
                inbox.ready.clear()
                listeners = list(inbox.listeners)
                if inbox.done:
                    del self._inboxes[ref_id]
            self._cond.notify_all()
        for ready in deliveries:
            for on_chunk, _ in listeners:
                self.run_callback(on_chunk, ready)

    def _on_fail(self, ref_id, error):
        with self._cond:
            if ref_id in self._forgotten:
                self._forgotten.discard(ref_id)
                return
            inbox = self._inbox(ref_id)
            inbox.error = error
            listeners = list(inbox.listeners)
            if listeners:
                del self._inboxes[ref_id]
            self._cond.notify_all()
        for _, on_error in listeners:
            if on_error is not None:
                self.run_callback(on_error, error)

    def expect(self, ref_id, on_chunk, on_error=None):
        """Register interest in ``ref_id``; chunks already here are replayed."""
        with self._cond:
            inbox = self._inbox(ref_id)
            if inbox.reading:
                raise ProtocolError(f"{ref_id} is already being read with recv()")
            inbox.listeners.append((on_chunk, on_error))
            backlog = list(inbox.ready)
            inbox.ready.clear()
            error = inbox.error
            if inbox.done or error is not None:
                del self._inboxes[ref_id]
        for chunk in backlog:
            self.run_callback(on_chunk, chunk)
        if error is not None and on_error is not None:
            self.run_callback(on_error, error)

    def forget(self, ref_id):
        """Drop interest in a ref; later frames for it are discarded."""
        with self._cond:
            inbox = self._inboxes.pop(ref_id, None)
            if inbox is None or not inbox.done:
                self._forgotten.add(ref_id)

    def recv(self, ref_id, timeout=None):
        """Yield the payload bytes of ``ref_id`` chunk by chunk, in seq order."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            inbox = self._inbox(ref_id)
            if inbox.listeners:
                raise ProtocolError(f"{ref_id} already has expectation callbacks")
            inbox.reading = True
        while True:
            with self._cond:
                while not inbox.ready and inbox.error is None:
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        raise TimeoutError(f"no data for {ref_id} within {timeout}s")
                    self._cond.wait(timeout=remaining)
                if inbox.ready:
                    chunk = inbox.ready.popleft()
                else:
                    self._inboxes.pop(ref_id, None)
                    raise inbox.error
                if chunk.final:
                    self._inboxes.pop(ref_id, None)
            yield chunk.data if chunk.data is not None else b""
            if chunk.final:
                return

    def open_refs(self):
        with self._cond:
            return sorted(self._inboxes)

    def close(self):
        self.router.unregister(self)
        with self._cond:
            self._inboxes.clear()
            self._forgotten.clear()
            self._sent_seq.clear()


# ---------------------------------------------------------------------------
# Data plane used by simulated executors
# ---------------------------------------------------------------------------


def synthetic_payload(request_id, ref_id, seq, nbytes):
    """Deterministic pseudo-random bytes; receivers can regenerate them."""
    key = f"{request_id}|{ref_id}|{seq}".encode("utf-8")
    seed = int.from_bytes(hashlib.sha256(key).digest()[:8], "big")
    return np.random.default_rng(seed).integers(0, 256, size=int(nbytes), dtype=np.uint8).tobytes()


class DataPlane:
    """Moves executor outputs to consumer sidecars.

    With ``simulate_latency`` the delivery happens after the modeled transfer
    time on the clock. With ``forward_payloads`` real synthetic bytes travel
    through the sidecars; otherwise envelopes describe the sizes only.
    """

    def __init__(
        self,
        clock,
        topology,
        sidecars,
        cost=None,
        forward_payloads=False,
        simulate_latency=True,
    ):
        self.clock = clock
        self.topology = topology
        self.sidecars = sidecars
        self.cost = cost or TransferCost()
        self.forward_payloads = forward_payloads
        self.simulate_latency = simulate_latency
        self.stats = {"transfers": 0, "bytes": 0, "transfer_ms": 0.0, "failures": 0}

    def forward(self, src_gpu, dest_address, request_id, ref_id, seq, nbytes, final, meta=None, on_error=None):
        dest_gpu = self.topology.gpu_at(dest_address)
        transport = route(self.topology, src_gpu, dest_gpu)
        cost_ms = self.cost.transfer_ms(nbytes, transport)
        self.stats["transfers"] += 1
        self.stats["bytes"] += nbytes
        self.stats["transfer_ms"] += cost_ms
        args = (src_gpu, dest_gpu, request_id, ref_id, seq, nbytes, final, meta, on_error)
        if self.simulate_latency:
            self.clock.call_later(cost_ms, self._send, *args)
        else:
            self._send(*args)
        return cost_ms

    def _send(self, src_gpu, dest_gpu, request_id, ref_id, seq, nbytes, final, meta, on_error):
        payload = synthetic_payload(request_id, ref_id, seq, nbytes) if self.forward_payloads else None
        try:
            self.sidecars[src_gpu].send(
                ref_id,
                payload,
                dest_gpu,
                seq=seq,
                final=final,
                request_id=request_id,
                nbytes=nbytes,
                meta=meta,
            )
        except FissionError as err:
            self.stats["failures"] += 1
            logger.error("Forwarding %s seq=%d to gpu%s failed: %s", ref_id, seq, dest_gpu, err.message)
            if on_error is not None:
                on_error(err)

    def fail(self, src_gpu, dest_address, ref_id, reason):
        try:
            self.sidecars[src_gpu].fail(ref_id, self.topology.gpu_at(dest_address), reason)
        except FissionError as err:
            logger.debug("Failure notice for %s not delivered: %s", ref_id, err.message)
