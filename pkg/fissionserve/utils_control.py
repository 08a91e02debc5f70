import logging
import threading

from dataclasses import dataclass, field

from fissionserve.utils_errors import (
    AppBusyError,
    CapacityExceeded,
    DuplicateAppError,
    FissionError,
    NotFoundError,
    PlacementConflict,
    PlacementError,
    PlannerInfeasible,
    UnknownGpuError,
)
from fissionserve.utils_clock import SimClock
from fissionserve.utils_config import ClusterConfig, ExecutorMode
from fissionserve.utils_dispatch import POLICIES, ReplicaEndpoint, TaskDispatcher
from fissionserve.utils_executor import build_executor
from fissionserve.utils_graph import validate
from fissionserve.utils_planner import DeploymentPlan, NodeSpec, PoolSpec, default_mix, plan_app
from fissionserve.utils_profiles import ModelCatalog, load_profiles
from fissionserve.utils_record import record, replay
from fissionserve.utils_registry import AppRegistry
from fissionserve.utils_remote import HostPool
from fissionserve.utils_sidecar import (
    DataPlane,
    FrameRouter,
    NodeArena,
    Sidecar,
    Topology,
    TransferCost,
    tcp_address,
)
from fissionserve.utils_tasks import SERVE_ROUTINES, ValidatedManifest, task_label, validate_manifest
from fissionserve.utils_workload import RequestTrace, WorkloadMix

logger = logging.getLogger("FissionServe")


# ---------------------------------------------------------------------------
# GPU pool
# ---------------------------------------------------------------------------


@dataclass
class Allocation:
    replica_id: str
    task_digest: str
    weight_bytes: int
    group: str = None


@dataclass
class Gpu:
    gpu_id: int
    node_id: str
    capacity_bytes: int
    allocations: list = field(default_factory=list)

    @property
    def free_bytes(self):
        return self.capacity_bytes - sum(a.weight_bytes for a in self.allocations)


class GpuPool:
    """Whole-GPU allocations. A GPU is shared only inside one co-location group."""

    def __init__(self, spec):
        self.gpus = {}
        for node in spec.nodes:
            for gpu_id in node.gpu_ids:
                self.gpus[gpu_id] = Gpu(gpu_id, node.node_id, node.capacity_bytes)

    def __len__(self):
        return len(self.gpus)

    def _gpu(self, gpu_id):
        try:
            return self.gpus[gpu_id]
        except KeyError:
            raise UnknownGpuError(f"GPU {gpu_id} is not in the pool") from None

    def free_bytes(self, gpu_id):
        return self._gpu(gpu_id).free_bytes

    def check(self, gpu_ids, weight_per_gpu, group=None):
        """Raise if the replica cannot take these GPUs."""
        gpus = [self._gpu(g) for g in gpu_ids]
        if len({g.node_id for g in gpus}) > 1:
            raise PlacementError(f"replica GPUs {list(gpu_ids)} span nodes")
        if len(set(gpu_ids)) != len(gpu_ids):
            raise PlacementError(f"replica GPUs {list(gpu_ids)} repeat a GPU")
        for gpu in gpus:
            others = {a.group for a in gpu.allocations}
            if gpu.allocations and (group is None or others != {group}):
                owners = ", ".join(a.replica_id for a in gpu.allocations)
                raise PlacementConflict(f"GPU {gpu.gpu_id} is already allocated to {owners}")
            if weight_per_gpu > gpu.free_bytes:
                raise CapacityExceeded(
                    f"{weight_per_gpu / 1e9:.1f} GB per GPU does not fit GPU {gpu.gpu_id} "
                    f"({gpu.free_bytes / 1e9:.1f} GB free)",
                    gpu_id=gpu.gpu_id,
                )

    def allocate(self, gpu_ids, replica_id, digest, weight_per_gpu, group=None):
        self.check(gpu_ids, weight_per_gpu, group)
        for gpu_id in gpu_ids:
            self.gpus[gpu_id].allocations.append(Allocation(replica_id, digest, int(weight_per_gpu), group))

    def release(self, replica_id):
        freed = 0
        for gpu in self.gpus.values():
            before = len(gpu.allocations)
            gpu.allocations = [a for a in gpu.allocations if a.replica_id != replica_id]
            freed += before - len(gpu.allocations)
        return freed

    def free_gpus(self):
        return sorted(g.gpu_id for g in self.gpus.values() if not g.allocations)

    def used_gpus(self):
        return sorted(g.gpu_id for g in self.gpus.values() if g.allocations)

    def free_spec(self):
        """The wholly free GPUs as a planner pool."""
        nodes = {}
        for gpu in sorted(self.gpus.values(), key=lambda g: g.gpu_id):
            if not gpu.allocations:
                nodes.setdefault(gpu.node_id, []).append(gpu)
        return PoolSpec([NodeSpec(node, [g.gpu_id for g in gpus], min(g.capacity_bytes for g in gpus)) for node, gpus in nodes.items()])

    def to_dict(self):
        return {
            "total": len(self.gpus),
            "free": len(self.free_gpus()),
            "gpus": [
                {
                    "gpu_id": g.gpu_id,
                    "node_id": g.node_id,
                    "capacity_bytes": g.capacity_bytes,
                    "free_bytes": g.free_bytes,
                    "allocations": [
                        {"replica_id": a.replica_id, "task_digest": a.task_digest, "group": a.group}
                        for a in g.allocations
                    ],
                }
                for g in sorted(self.gpus.values(), key=lambda g: g.gpu_id)
            ],
        }


# ---------------------------------------------------------------------------
# Task managers and apps
# ---------------------------------------------------------------------------


@dataclass
class TaskManagerState:
    task_digest: str
    descriptor: object
    replicas: list = field(default_factory=list)
    ref_count: int = 0

    @property
    def label(self):
        return task_label(self.descriptor.unit_task)

    def to_dict(self):
        return {
            "task_digest": self.task_digest,
            "label": self.label,
            "model_id": self.descriptor.unit_task.model_id,
            "weight_bytes": self.descriptor.weight_bytes,
            "ref_count": self.ref_count,
            "replicas": [
                dict(endpoint.to_dict(), tp_degree=len(endpoint.gpu_ids)) for endpoint in self.replicas
            ],
        }


@dataclass
class AppState:
    validated: object
    routine: object
    in_flight: int = 0
    served: int = 0

    @property
    def manifest(self):
        return self.validated.manifest

    def composites(self, request):
        names = self.routine.calls(self.manifest.tasks, request)
        return {name: self.manifest.tasks[name] for name in names}


def _normalize_placement(placement):
    replicas = []
    for entry in placement:
        if isinstance(entry, tuple):
            gpus, group = entry
        else:
            gpus, group = entry, None
        replicas.append((sorted(int(g) for g in gpus), group))
    return replicas


# ---------------------------------------------------------------------------
# Control plane
# ---------------------------------------------------------------------------


class ControlPlane:
    def __init__(self, config=None, profiles=None, catalog=None, clock=None, registry=None, executor_factory=None):
        self.config = config or ClusterConfig()
        self.profiles = profiles if profiles is not None else load_profiles(self.config.profiles)
        self.catalog = catalog if catalog is not None else ModelCatalog.load(self.config.catalog)
        self.clock = clock or SimClock(self.config.clock, self.config.clock_speed)
        self.registry = registry if registry is not None else AppRegistry(self.config.registry_path)
        self.pool = GpuPool(self.config.pool_spec())
        self.topology = Topology(self.config.gpu_nodes())
        self.router = FrameRouter()
        self.arenas = {}
        self.sidecars = {}
        self.hosts = None
        self.remote = self.config.executor_mode is ExecutorMode.MULTI_PROCESS
        if self.remote:
            for gpu in self.topology.nodes:
                self.topology.set_address(gpu, tcp_address(self.config.host, self.config.sidecar_port(gpu)))
        else:
            self._start_sidecars()
        self.dataplane = DataPlane(
            self.clock,
            self.topology,
            self.sidecars,
            cost=TransferCost.from_dict(self.config.transfer),
            forward_payloads=self.config.forward_payloads,
        )
        self.dispatcher = TaskDispatcher(
            self.clock,
            policy=POLICIES[self.config.dispatch_policy](),
            dispatch_timeout_ms=self.config.dispatch_timeout_ms,
        )
        self.executor_factory = executor_factory or self._local_executor
        self.task_managers = {}
        self.apps = {}
        self.metrics_counters = {"requests": 0, "completed": 0, "failed": 0, "errors": {}, "latency_ms_sum": 0.0}
        self._lock = threading.RLock()
        self._replica_seq = 0

    def _start_sidecars(self):
        if self.config.forward_payloads:
            per_node = {}
            for gpu, node in self.topology.nodes.items():
                per_node.setdefault(node, []).append(gpu)
            for node, gpus in per_node.items():
                arena = NodeArena(node, self.config.arena_bytes)
                self.arenas[node] = arena
                for index, gpu in enumerate(sorted(gpus)):
                    self.sidecars[gpu] = Sidecar(
                        gpu,
                        self.topology,
                        self.router,
                        arena=arena.slice(
                            index,
                            len(gpus),
                            backpressure_timeout=self.config.backpressure_timeout_s,
                            orphan_timeout=self.config.orphan_timeout_s,
                        ),
                        chunk_bytes=self.config.chunk_bytes,
                    )
        else:
            for gpu in self.topology.nodes:
                self.sidecars[gpu] = Sidecar(gpu, self.topology, self.router, chunk_bytes=self.config.chunk_bytes)
        logger.debug("Started %d sidecars (%d arenas)", len(self.sidecars), len(self.arenas))

    # -- lifecycle ----------------------------------------------------------

    def start(self, drive=True, restore=True):
        """Start host processes and the clock driver, then restore persisted apps."""
        if self.remote and self.hosts is None:
            self.hosts = HostPool(self.config, self.clock, self.topology)
            self.hosts.start()
            self.executor_factory = self.hosts.executor
        if drive:
            self.clock.start()
        if restore:
            for manifest in self.registry.manifests():
                if manifest.app_id in self.apps:
                    continue
                try:
                    self.register_app(manifest, persist=False)
                except FissionError as err:
                    logger.error("Could not restore app %s: %s", manifest.app_id, err.message)
        return self

    def _on_clock(self, fn, *args):
        """Run ``fn`` where executor state lives: the clock thread when it is driven."""
        if not self.clock.driven or threading.current_thread() is self.clock._thread:
            return fn(*args)
        done = threading.Event()
        box = {}

        def run():
            try:
                box["value"] = fn(*args)
            except BaseException as err:
                box["error"] = err
            finally:
                done.set()

        self.clock.post(run)
        done.wait()
        if "error" in box:
            raise box["error"]
        return box.get("value")

    def shutdown(self):
        with self._lock:
            for digest in list(self.task_managers):
                self._teardown(digest)
            self.task_managers.clear()
            self.apps.clear()
        self.clock.stop()
        if self.hosts is not None:
            self.hosts.stop()
            self.hosts = None
        for sidecar in self.sidecars.values():
            sidecar.close()
        self.router.close()
        for arena in self.arenas.values():
            arena.close()
        self.arenas.clear()
        logger.info("Control plane shut down")

    # -- task managers ------------------------------------------------------

    def _local_executor(self, replica_id, descriptor, gpu_ids, free_bytes_per_gpu):
        return build_executor(
            replica_id,
            descriptor,
            self.profiles,
            gpu_ids,
            self.clock,
            self.sidecars[gpu_ids[0]],
            self.dataplane,
            free_bytes_per_gpu,
        )

    def spawn_task_manager(self, descriptor, placement):
        """Allocate GPUs and launch one executor per replica placement."""
        digest = descriptor.digest
        label = task_label(descriptor.unit_task)
        replicas = _normalize_placement(placement)
        if not replicas:
            raise PlacementError(f"no replicas placed for {label}")
        state = TaskManagerState(digest, descriptor)
        allocated = []
        try:
            for gpus, group in replicas:
                tp = len(gpus)
                if tp not in descriptor.allowed_tp_degrees:
                    raise PlacementError(
                        f"{label}: TP-{tp} is not allowed (allowed {sorted(descriptor.allowed_tp_degrees)})"
                    )
                self._replica_seq += 1
                replica_id = f"{label}-{digest[:8]}-r{self._replica_seq}"
                self.pool.allocate(gpus, replica_id, digest, descriptor.weight_bytes / tp, group)
                allocated.append(replica_id)
                free = min(self.pool.free_bytes(g) for g in gpus)
                executor = self.executor_factory(replica_id, descriptor, gpus, free)
                state.replicas.append(
                    ReplicaEndpoint(
                        replica_id=replica_id,
                        task_digest=digest,
                        gpu_ids=gpus,
                        node_id=self.topology.node_of(gpus[0]),
                        sidecar_address=self.topology.address_of(gpus[0]),
                        executor=executor,
                    )
                )
        except Exception as err:
            logger.error("Spawning %s failed: %s", label, getattr(err, "message", err))
            for endpoint in state.replicas:
                self._on_clock(endpoint.executor.shutdown)
            for replica_id in allocated:
                self.pool.release(replica_id)
            raise
        for endpoint in state.replicas:
            self.dispatcher.register_replica(endpoint)
        self.task_managers[digest] = state
        logger.info(
            "Spawned %s: %d replica(s) on GPUs %s",
            label,
            len(state.replicas),
            [e.gpu_ids for e in state.replicas],
        )
        return state

    def _teardown(self, digest):
        state = self.task_managers.pop(digest, None)
        if state is None:
            return
        for endpoint in self.dispatcher.unregister_replicas(digest):
            self._on_clock(endpoint.executor.shutdown)
            self.pool.release(endpoint.replica_id)
        logger.info("Tore down %s (%s)", state.label, digest[:12])

    # -- placement ----------------------------------------------------------

    def _precheck(self, descriptors):
        largest = max(g.capacity_bytes for g in self.pool.gpus.values())
        for descriptor in descriptors.values():
            smallest = descriptor.weight_bytes / max(descriptor.allowed_tp_degrees)
            if smallest > largest:
                raise CapacityExceeded(
                    f"{task_label(descriptor.unit_task)} {descriptor.unit_task.model_id} needs "
                    f"{smallest / 1e9:.1f} GB per GPU at TP-{max(descriptor.allowed_tp_degrees)}; "
                    f"GPUs hold {largest / 1e9:.1f} GB",
                    label=task_label(descriptor.unit_task),
                )

    def _placements(self, validated, descriptors, plan_hint):
        if not descriptors:
            return {}
        if plan_hint is not None:
            placements = plan_hint.placements()
            missing = [task_label(d.unit_task) for digest, d in descriptors.items() if digest not in placements]
            if missing:
                raise PlacementError(f"plan has no placement for {', '.join(missing)}")
            return {digest: placements[digest] for digest in descriptors}
        if self.config.placement_policy == "minimal":
            return self._minimal(descriptors)
        uses = {d: validated.uses.get(d, 1) for d in descriptors}
        subset = ValidatedManifest(validated.manifest, {d: validated.units[d] for d in descriptors}, {}, uses)
        mix = WorkloadMix.load(self.config.mix) if self.config.mix else default_mix(validated.manifest)
        free = self.pool.free_spec()
        if not free.nodes:
            raise CapacityExceeded("no free GPUs left for new task managers")
        try:
            planned = plan_app(
                subset, self.catalog, self.profiles, mix, free, fuse_pairs=self.config.fuse_pairs, consider_monolith=False
            )
        except PlannerInfeasible as err:
            if err.details.get("oom"):
                raise CapacityExceeded(err.message, component=err.component) from None
            raise PlacementError(f"insufficient GPUs: {err.message}") from None
        return planned.placements()

    def _minimal(self, descriptors):
        """Smallest feasible TP per task, first fit on the lowest free GPU ids."""
        taken, placements = set(), {}
        ordered = sorted(descriptors.items(), key=lambda kv: (-kv[1].weight_bytes, kv[0]))
        for digest, descriptor in ordered:
            chosen = None
            for tp in sorted(descriptor.allowed_tp_degrees):
                for node in self.pool.free_spec().nodes:
                    free = [g for g in node.gpu_ids if g not in taken]
                    if len(free) >= tp and descriptor.weight_bytes / tp <= node.capacity_bytes:
                        chosen = free[:tp]
                        break
                if chosen:
                    break
            if chosen is None:
                need = min(descriptor.allowed_tp_degrees)
                raise PlacementError(
                    f"insufficient GPUs: {task_label(descriptor.unit_task)} needs {need} free GPU(s) on one node, "
                    f"{len(self.pool.free_gpus()) - len(taken)} free in total"
                )
            taken.update(chosen)
            placements[digest] = [(chosen, None)]
        return placements

    # -- apps ---------------------------------------------------------------

    def register_app(self, manifest, plan_hint=None, persist=True):
        with self._lock:
            if persist and self.registry.has_app(manifest.app_id):
                raise DuplicateAppError(f"duplicate app {manifest.app_id!r}")
            validated = validate_manifest(manifest, existing_app_ids=set(self.apps))
            if isinstance(plan_hint, dict):
                plan_hint = DeploymentPlan.from_dict(plan_hint)
            new = {
                digest: self.catalog.descriptor_for(unit)
                for digest, unit in validated.units.items()
                if digest not in self.task_managers
            }
            self._precheck(new)
            placements = self._placements(validated, new, plan_hint)
            spawned = []
            try:
                for digest, descriptor in new.items():
                    self.spawn_task_manager(descriptor, placements[digest])
                    spawned.append(digest)
            except Exception:
                for digest in spawned:
                    self._teardown(digest)
                raise
            for digest in validated.units:
                self.task_managers[digest].ref_count += 1
            self.apps[manifest.app_id] = AppState(validated, SERVE_ROUTINES[manifest.serve_entry])
            if persist:
                self.registry.insert(manifest)
        logger.info(
            "Registered app %s: %d unit tasks (%d new, %d shared)",
            manifest.app_id,
            len(validated.units),
            len(new),
            len(validated.units) - len(new),
        )
        return manifest.app_id

    def deregister_app(self, app_id, force=False):
        with self._lock:
            app = self.apps.get(app_id)
            if app is None:
                raise NotFoundError(f"unknown app {app_id!r}")
            if app.in_flight and not force:
                raise AppBusyError(f"app {app_id} has {app.in_flight} in-flight request(s)")
            del self.apps[app_id]
            for digest in app.validated.units:
                state = self.task_managers.get(digest)
                if state is None:
                    continue
                state.ref_count -= 1
                if state.ref_count <= 0:
                    self._teardown(digest)
            if self.registry.has_app(app_id):
                self.registry.remove(app_id)
        logger.info("Deregistered app %s", app_id)
        return True

    def _app(self, app_id):
        with self._lock:
            app = self.apps.get(app_id)
        if app is None:
            raise NotFoundError(f"unknown app {app_id!r}")
        return app

    def _start(self, app, composites, request, trace, on_done=None):
        with self._lock:
            app.in_flight += 1
            self.metrics_counters["requests"] += 1
        try:
            graph = record(composites, request, self.catalog)
            validate(graph)
            dispatched = self.dispatcher.dispatch(
                graph, on_done=lambda rec: self._finished(app, trace, rec, None, on_done)
            )
        except FissionError as err:
            self._finished(app, trace, None, err, on_done)
            raise
        return graph, dispatched

    def _finished(self, app, trace, dispatched, error, on_done):
        if dispatched is not None:
            trace.fill(dispatched)
        elif error is not None:
            trace.error = error.code
        with self._lock:
            app.in_flight -= 1
            app.served += 1
            counters = self.metrics_counters
            if trace.ok:
                counters["completed"] += 1
                counters["latency_ms_sum"] += trace.latency
            else:
                counters["failed"] += 1
                code = trace.error or "unknown"
                counters["errors"][code] = counters["errors"].get(code, 0) + 1
        if on_done is not None:
            on_done(trace)

    def invoke(self, app_id, request):
        """Run one request; returns (response chunk iterator, RequestTrace)."""
        app = self._app(app_id)
        composites = app.composites(request)
        trace = RequestTrace(request.request_id, request.class_name, arrival=self.clock.now)
        graph, dispatched = self._start(app, composites, request, trace)
        outputs = replay(composites, request, self.dispatcher.results(dispatched), graph, self.catalog)
        return app.routine.respond(request, outputs), trace

    def submit(self, app_id, request, on_done=None, arrival=None):
        """Dispatch without consuming the response; ``on_done(trace)`` fires at completion."""
        app = self._app(app_id)
        composites = app.composites(request)
        trace = RequestTrace(
            request.request_id, request.class_name, arrival=self.clock.now if arrival is None else arrival
        )
        graph, dispatched = self._start(app, composites, request, trace, on_done)
        replay(composites, request, self.dispatcher.results(dispatched), graph, self.catalog)
        return trace

    # -- introspection ------------------------------------------------------

    def state(self):
        with self._lock:
            return {
                "clock": {"mode": self.clock.mode.value, "now_ms": self.clock.now},
                "executor_mode": self.config.executor_mode.value,
                "pool": self.pool.to_dict(),
                "apps": {
                    app_id: {
                        "serve_entry": app.manifest.serve_entry,
                        "unit_tasks": sorted(app.validated.units),
                        "in_flight": app.in_flight,
                        "served": app.served,
                    }
                    for app_id, app in self.apps.items()
                },
                "task_managers": {d: s.to_dict() for d, s in self.task_managers.items()},
            }

    def utilization(self, start=None, end=None):
        """Busy fraction per task manager label over [start, end]."""
        end = self.clock.now if end is None else end
        start = 0.0 if start is None else start
        window = max(end - start, 1e-9)
        result = {}
        for state in self.task_managers.values():
            replicas = state.replicas
            if not replicas:
                continue
            busy = sum(self._on_clock(r.executor.busy_ms, start, end) for r in replicas)
            key = state.label
            while key in result:
                key += "'"
            result[key] = busy / (len(replicas) * window)
        return result

    def metrics(self):
        with self._lock:
            counters = dict(self.metrics_counters, errors=dict(self.metrics_counters["errors"]))
        completed = counters["completed"]
        counters["mean_latency_ms"] = counters["latency_ms_sum"] / completed if completed else None
        counters["dispatcher"] = self.dispatcher.stats()
        counters["dataplane"] = dict(self.dataplane.stats)
        counters["executors"] = {
            endpoint.replica_id: self._on_clock(endpoint.executor.stats)
            for state in list(self.task_managers.values())
            for endpoint in state.replicas
        }
        counters["sidecars"] = {gpu: dict(s.stats) for gpu, s in self.sidecars.items()}
        return counters
