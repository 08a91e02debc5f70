import time
import random
import logging
import itertools
import threading
import multiprocessing

from fissionserve.utils_errors import (
    DispatchError,
    ExecutorFailure,
    FissionError,
    ProtocolError,
    error_from_dict,
)
from fissionserve.utils_clock import SimClock
from fissionserve.utils_config import ClusterConfig, configure_logging
from fissionserve.utils_executor import build_executor
from fissionserve.utils_profiles import load_profiles
from fissionserve.utils_sidecar import DataPlane, FrameRouter, NodeArena, Sidecar, Topology, TransferCost
from fissionserve.utils_tasks import TaskDescriptor
from fissionserve.utils_wire import FrameConnection, FrameServer

logger = logging.getLogger("FissionServe")

HOST_START_TIMEOUT_S = 30.0
REPLY_TIMEOUT_S = 30.0


# ---------------------------------------------------------------------------
# Host process
# ---------------------------------------------------------------------------


class RemoteSink:
    """Forwards an executor's reports for one invocation to the control plane."""

    def __init__(self, conn, replica_id, request_id):
        self.conn = conn
        self.replica_id = replica_id
        self.request_id = request_id

    def _send(self, kind, invocation_id, **fields):
        header = {
            "type": kind,
            "replica_id": self.replica_id,
            "request_id": self.request_id,
            "invocation_id": invocation_id,
        }
        header.update(fields)
        try:
            self.conn.send(header)
        except (OSError, ProtocolError) as err:
            logger.error("Report %s for %s lost: %s", kind, invocation_id, err)

    def status(self, invocation_id, status, at):
        self._send("status", invocation_id, status=status, at=at)

    def chunk(self, invocation_id, output_index, chunk):
        self._send("chunk", invocation_id, output_index=output_index, chunk=chunk)

    def output_done(self, invocation_id, output_index):
        self._send("output_done", invocation_id, output_index=output_index)

    def complete(self, invocation_id, info=None):
        self._send("result", invocation_id, info=info or {})

    def fail(self, invocation_id, error):
        self._send("error", invocation_id, error=error.to_dict())


class ExecutorHost:
    """Everything that lives inside one host process."""

    def __init__(self, gpu_id, config, topology, arena=None):
        self.gpu_id = gpu_id
        self.config = config
        self.clock = SimClock(config.clock, config.clock_speed)
        self.topology = topology
        self.router = FrameRouter()
        self.sidecar = Sidecar(
            gpu_id,
            topology,
            self.router,
            arena=arena,
            chunk_bytes=config.chunk_bytes,
            callback_runner=self.clock.post,
        )
        self.dataplane = DataPlane(
            self.clock,
            topology,
            {gpu_id: self.sidecar},
            cost=TransferCost.from_dict(config.transfer),
            forward_payloads=config.forward_payloads,
            simulate_latency=False,
        )
        self.profiles = load_profiles(config.profiles)
        self.executors = {}
        self.stopped = threading.Event()
        self.servers = []

    def serve(self):
        self.servers = [
            FrameServer(
                self.config.host,
                self.config.sidecar_port(self.gpu_id),
                lambda conn, header, body: self.sidecar.handle_frame(header, body),
                name=f"sidecar-gpu{self.gpu_id}",
            ).start(),
            FrameServer(
                self.config.host,
                self.config.executor_port(self.gpu_id),
                self.on_frame,
                name=f"host-gpu{self.gpu_id}",
            ).start(),
        ]
        logger.info("Executor host for gpu%d listening", self.gpu_id)

    def on_frame(self, conn, header, body):
        kind = header["type"]
        if kind == "spawn":
            self.clock.post(self._spawn, conn, header)
        elif kind == "dispatch":
            executor = self.executors.get(header["replica_id"])
            if executor is None:
                self._reject(conn, header, f"replica {header['replica_id']} is not on gpu{self.gpu_id}")
                return
            sink = RemoteSink(conn, header["replica_id"], header["message"]["request_id"])
            self.clock.post(executor.submit, header["message"], sink)
        elif kind == "cancel":
            executor = self.executors.get(header["replica_id"])
            if executor is not None:
                self.clock.post(executor.cancel, header["request_id"], header["invocation_id"])
        elif kind == "stats":
            self.clock.post(self._stats, conn, header)
        elif kind == "shutdown":
            if header.get("replica_id"):
                self.clock.post(self._drop, header["replica_id"])
            else:
                self.stopped.set()
        else:
            logger.warning("Host gpu%d ignoring %s frame", self.gpu_id, kind)

    def _spawn(self, conn, header):
        replica_id = header["replica_id"]
        try:
            executor = build_executor(
                replica_id,
                TaskDescriptor.from_dict(header["descriptor"]),
                self.profiles,
                header["gpu_ids"],
                self.clock,
                self.sidecar,
                self.dataplane,
                header.get("free_bytes_per_gpu"),
            )
        except FissionError as err:
            conn.send({"type": "error", "token": header["token"], "error": err.to_dict()})
            return
        self.executors[replica_id] = executor
        logger.info("Host gpu%d spawned %r", self.gpu_id, executor)
        conn.send({"type": "spawned", "token": header["token"], "replica_id": replica_id})

    def _reject(self, conn, header, reason):
        message = header["message"]
        error = DispatchError(reason)
        RemoteSink(conn, header["replica_id"], message["request_id"]).fail(message["invocation_id"], error)

    def _stats(self, conn, header):
        executor = self.executors.get(header.get("replica_id"))
        reply = {"type": "stats", "token": header["token"], "stats": None, "busy_ms": 0.0}
        if executor is not None:
            reply["stats"] = executor.stats()
            reply["busy_ms"] = executor.busy_ms(header.get("start"), header.get("end"))
        reply["sidecar"] = dict(self.sidecar.stats)
        conn.send(reply)

    def _drop(self, replica_id):
        executor = self.executors.pop(replica_id, None)
        if executor is not None:
            executor.shutdown()
            logger.info("Host gpu%d removed %s", self.gpu_id, replica_id)

    def close(self):
        for replica_id in list(self.executors):
            self._drop(replica_id)
        for server in self.servers:
            server.stop()
        self.sidecar.close()
        self.router.close()
        self.clock.stop()


def host_main(gpu_id, config_dict, topology_dict, arena_name, clock_origin, ready):
    """Entry point of a host process."""
    configure_logging()
    config = ClusterConfig.from_dict(config_dict)
    topology = Topology.from_dict(topology_dict)
    node_arena = arena = None
    if arena_name is not None:
        node_id = topology.node_of(gpu_id)
        peers = sorted(g for g, n in topology.nodes.items() if n == node_id)
        node_arena = NodeArena(node_id, config.arena_bytes, name=arena_name, create=False)
        arena = node_arena.slice(
            peers.index(gpu_id),
            len(peers),
            backpressure_timeout=config.backpressure_timeout_s,
            orphan_timeout=config.orphan_timeout_s,
        )
    host = ExecutorHost(gpu_id, config, topology, arena)
    host.clock.anchor(clock_origin)
    host.clock.start()
    try:
        host.serve()
        ready.set()
        host.stopped.wait()
    finally:
        host.close()
        if node_arena is not None:
            node_arena.close()
        logger.info("Executor host for gpu%d stopped", gpu_id)


# ---------------------------------------------------------------------------
# Control-plane side
# ---------------------------------------------------------------------------


class HostLink:
    """The control plane's connection to one host's executor port."""

    def __init__(self, gpu_id, host, port, clock):
        self.gpu_id = gpu_id
        self.host = host
        self.port = port
        self.clock = clock
        self.conn = None
        self.clients = {}
        self._tokens = itertools.count(1)
        self._waiting = {}
        self._lock = threading.Lock()

    def connect(self, timeout=HOST_START_TIMEOUT_S, max_retries=8):
        retry_count = 0
        deadline = time.monotonic() + timeout
        while True:
            try:
                self.conn = FrameConnection.connect(self.host, self.port, name=f"host-gpu{self.gpu_id}")
                break
            except OSError as err:
                if retry_count >= max_retries or time.monotonic() > deadline:
                    raise DispatchError(f"executor host for gpu{self.gpu_id} unreachable: {err}") from None
                retry_count += 1
                # exponential backoff with jitter
                wait_time = min(2.0, 0.05 * (2 ** (retry_count - 1))) * random.uniform(0.5, 1.5)
                logger.debug("Retry %d/%d connecting to gpu%d in %.2fs", retry_count, max_retries, self.gpu_id, wait_time)
                time.sleep(wait_time)
        self.conn.serve(self._on_frame, self._on_close)
        return self

    def request(self, header, timeout=REPLY_TIMEOUT_S):
        """Send a frame carrying a fresh token and wait for the matching reply."""
        token = next(self._tokens)
        done = threading.Event()
        with self._lock:
            self._waiting[token] = [done, None]
        self.conn.send(dict(header, token=token))
        if not done.wait(timeout):
            with self._lock:
                self._waiting.pop(token, None)
            raise DispatchError(f"executor host for gpu{self.gpu_id} did not answer {header['type']}")
        with self._lock:
            return self._waiting.pop(token)[1]

    def send(self, header):
        self.conn.send(header)

    def _on_frame(self, header, body):
        token = header.get("token")
        if token is not None:
            with self._lock:
                slot = self._waiting.get(token)
                if slot is not None:
                    slot[1] = header
                    slot[0].set()
            return
        client = self.clients.get(header.get("replica_id"))
        if client is None:
            logger.debug("Dropping %s frame for unknown replica %s", header["type"], header.get("replica_id"))
            return
        self.clock.post(client.on_report, header)

    def _on_close(self, error):
        if error is None:
            return
        for client in list(self.clients.values()):
            self.clock.post(client.on_host_lost, error)

    def close(self):
        if self.conn is not None:
            self.conn.close()


class RemoteExecutorClient:
    """Stands in for an Executor whose replica runs in a host process."""

    def __init__(self, link, replica_id, descriptor, gpu_ids):
        self.link = link
        self.replica_id = replica_id
        self.descriptor = descriptor
        self.gpu_ids = list(gpu_ids)
        self.sinks = {}

    def __repr__(self):
        return f"RemoteExecutorClient({self.replica_id}, gpus={self.gpu_ids})"

    def submit(self, message, sink):
        self.sinks[(message["request_id"], message["invocation_id"])] = sink
        try:
            self.link.send({"type": "dispatch", "replica_id": self.replica_id, "message": message})
        except ProtocolError as err:
            self.sinks.pop((message["request_id"], message["invocation_id"]), None)
            raise DispatchError(f"{self.replica_id} unreachable: {err.message}") from None

    def cancel(self, request_id, invocation_id):
        if self.sinks.pop((request_id, invocation_id), None) is None:
            return False
        try:
            self.link.send(
                {
                    "type": "cancel",
                    "replica_id": self.replica_id,
                    "request_id": request_id,
                    "invocation_id": invocation_id,
                }
            )
        except ProtocolError:
            return False
        return True

    def on_report(self, header):
        key = (header["request_id"], header["invocation_id"])
        sink = self.sinks.get(key)
        if sink is None:
            return
        kind = header["type"]
        invocation_id = header["invocation_id"]
        if kind == "status":
            sink.status(invocation_id, header["status"], header["at"])
        elif kind == "chunk":
            sink.chunk(invocation_id, header["output_index"], header["chunk"])
        elif kind == "output_done":
            sink.output_done(invocation_id, header["output_index"])
        elif kind == "result":
            self.sinks.pop(key, None)
            sink.complete(invocation_id, header.get("info"))
        elif kind == "error":
            self.sinks.pop(key, None)
            sink.fail(invocation_id, error_from_dict(header["error"]))

    def on_host_lost(self, error):
        for (_, invocation_id), sink in list(self.sinks.items()):
            sink.fail(invocation_id, ExecutorFailure(f"host of {self.replica_id} lost: {error}", invocation_id=invocation_id))
        self.sinks.clear()

    def _stats_reply(self, start=None, end=None):
        return self.link.request({"type": "stats", "replica_id": self.replica_id, "start": start, "end": end})

    def stats(self):
        reply = self._stats_reply()
        return reply.get("stats") or {"replica_id": self.replica_id, "kind": "Remote"}

    def busy_ms(self, start=None, end=None):
        return float(self._stats_reply(start, end).get("busy_ms", 0.0))

    def shutdown(self):
        self.link.clients.pop(self.replica_id, None)
        self.sinks.clear()
        try:
            self.link.send({"type": "shutdown", "replica_id": self.replica_id})
        except ProtocolError as err:
            logger.warning("Shutdown of %s not delivered: %s", self.replica_id, err.message)


class HostPool:
    """Starts one host process per GPU and hands out executor clients."""

    def __init__(self, config, clock, topology):
        self.config = config
        self.clock = clock
        self.topology = topology
        self.context = multiprocessing.get_context("spawn")
        self.processes = {}
        self.links = {}
        self.arenas = {}

    def start(self):
        origin = self.clock.anchor()
        if self.config.forward_payloads:
            for node in sorted(set(self.topology.nodes.values())):
                self.arenas[node] = NodeArena(node, self.config.arena_bytes)
        ready = {}
        for gpu, node in sorted(self.topology.nodes.items()):
            arena = self.arenas.get(node)
            ready[gpu] = self.context.Event()
            process = self.context.Process(
                target=host_main,
                args=(
                    gpu,
                    self.config.to_dict(),
                    self.topology.to_dict(),
                    arena.name if arena is not None else None,
                    origin,
                    ready[gpu],
                ),
                name=f"fission-host-gpu{gpu}",
                daemon=True,
            )
            process.start()
            self.processes[gpu] = process
        for gpu, event in ready.items():
            if not event.wait(HOST_START_TIMEOUT_S):
                self.stop()
                raise DispatchError(f"executor host for gpu{gpu} did not start")
            self.links[gpu] = HostLink(gpu, self.config.host, self.config.executor_port(gpu), self.clock).connect()
        logger.info("Started %d executor hosts", len(self.processes))
        return self

    def executor(self, replica_id, descriptor, gpu_ids, free_bytes_per_gpu=None):
        link = self.links[gpu_ids[0]]
        reply = link.request(
            {
                "type": "spawn",
                "replica_id": replica_id,
                "descriptor": descriptor.to_dict(),
                "gpu_ids": list(gpu_ids),
                "free_bytes_per_gpu": free_bytes_per_gpu,
            }
        )
        if reply["type"] == "error":
            raise error_from_dict(reply["error"])
        client = RemoteExecutorClient(link, replica_id, descriptor, gpu_ids)
        link.clients[replica_id] = client
        return client

    def stop(self, timeout=5.0):
        for gpu, link in self.links.items():
            try:
                link.send({"type": "shutdown"})
            except (OSError, ProtocolError):
                logger.debug("Host gpu%d already gone", gpu)
            link.close()
        for gpu, process in self.processes.items():
            process.join(timeout)
            if process.is_alive():
                logger.warning("Host gpu%d did not exit, terminating", gpu)
                process.terminate()
                process.join(timeout)
        for arena in self.arenas.values():
            arena.close()
        self.links.clear()
        self.processes.clear()
        self.arenas.clear()
        logger.info("Executor hosts stopped")
