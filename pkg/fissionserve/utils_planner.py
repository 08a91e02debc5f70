import json
import math
import logging
import itertools

from pathlib import Path
from dataclasses import dataclass, field

from fissionserve.utils_errors import (
    ExecutorFailure,
    PlannerInfeasible,
    ProfileError,
    TractabilityError,
)
from fissionserve.utils_profiles import GB, encoder_rate, generator_rate, llm_rate
from fissionserve.utils_tasks import (
    CompositeTaskSpec,
    Modality,
    TaskClass,
    canonical_hash,
    make_composite,
    task_label,
    units_of,
)
from fissionserve.utils_executor import monolith_components
from fissionserve.utils_workload import WorkloadMix

logger = logging.getLogger("FissionServe")

ORACLE_MAX_GPUS = 16
ORACLE_MAX_COMPONENTS = 5

_ROLE_ORDER = ("encoder", "llm", "thinker", "talker", "generator", "pair", "monolith")
_UNITS = {"encoder": "items", "monolith": "requests"}
PAIR_NAME = "talker+generator"


# ---------------------------------------------------------------------------
# GPU pool
# ---------------------------------------------------------------------------


@dataclass
class NodeSpec:
    node_id: str
    gpu_ids: list
    capacity_bytes: int = 80 * GB


@dataclass
class PoolSpec:
    nodes: list

    @classmethod
    def uniform(cls, gpus, nodes=1, capacity_bytes=80 * GB):
        """``gpus`` GPUs split as evenly as possible over ``nodes`` nodes."""
        if gpus <= 0 or nodes <= 0:
            raise PlannerInfeasible("the GPU pool is empty")
        specs, next_gpu = [], 0
        for index in range(nodes):
            count = gpus // nodes + (1 if index < gpus % nodes else 0)
            specs.append(NodeSpec(f"node{index}", list(range(next_gpu, next_gpu + count)), capacity_bytes))
            next_gpu += count
        return cls([s for s in specs if s.gpu_ids])

    @property
    def gpu_count(self):
        return sum(len(n.gpu_ids) for n in self.nodes)

    def node_of(self, gpu_id):
        for node in self.nodes:
            if gpu_id in node.gpu_ids:
                return node
        return None

    def to_dict(self):
        return {
            "nodes": [
                {"node_id": n.node_id, "gpu_ids": list(n.gpu_ids), "capacity_bytes": n.capacity_bytes}
                for n in self.nodes
            ]
        }

    @classmethod
    def from_dict(cls, data):
        return cls([NodeSpec(n["node_id"], list(n["gpu_ids"]), int(n["capacity_bytes"])) for n in data["nodes"]])


# ---------------------------------------------------------------------------
# Components, demand and capacity
# ---------------------------------------------------------------------------


@dataclass
class MixStats:
    """Mix-weighted means the closed-form rates need."""

    prompt_tokens: float = 0.0
    output_tokens: float = 0.0
    items: float = 0.0
    audio_prompt_tokens: float = 0.0
    audio_tokens: float = 0.0
    mix: WorkloadMix = None

    @classmethod
    def from_mix(cls, mix):
        if mix is None:
            return cls()
        audio_share = mix.expect(lambda c: 1.0 if c.audio_output else 0.0)
        audio_prompt = audio_tokens = 0.0
        if audio_share > 0:
            audio_prompt = mix.expect(lambda c: c.output_tokens.mean if c.audio_output else 0.0) / audio_share
            audio_tokens = mix.expect(lambda c: c.mean_audio_tokens) / audio_share
        return cls(
            prompt_tokens=mix.expect(lambda c: c.prompt_tokens.mean),
            output_tokens=mix.expect(lambda c: c.output_tokens.mean),
            items=mix.expect(lambda c: c.mean_items()),
            audio_prompt_tokens=audio_prompt,
            audio_tokens=audio_tokens,
            mix=mix,
        )


def component_role(spec):
    if spec.task_class is TaskClass.ENCODER:
        return "encoder"
    if spec.task_class is TaskClass.GENERATOR:
        return "generator"
    return spec.role if spec.role in ("thinker", "talker", "monolith") else "llm"


@dataclass
class Component:
    """One independently scaled deployment unit (possibly a fused pair)."""

    name: str
    role: str
    descriptors: list
    profiles: dict
    uses: int = 1
    modality: Modality = None

    @property
    def digests(self):
        return [d.digest for d in self.descriptors]

    @property
    def labels(self):
        return [task_label(d.unit_task) for d in self.descriptors]

    @property
    def weight_bytes(self):
        return sum(d.weight_bytes for d in self.descriptors)

    @property
    def allowed_tp(self):
        allowed = set.intersection(*(set(d.allowed_tp_degrees) for d in self.descriptors))
        for profile in self.profiles.values():
            allowed &= set(profile.tp_scaling)
        return sorted(allowed)

    @property
    def unit(self):
        return _UNITS.get(self.role, "tokens")

    def work(self, request_class):
        """Work units one request of this class puts on the component."""
        if self.role == "encoder":
            return request_class.mean_items(self.modality)
        if self.role in ("llm", "thinker"):
            return request_class.output_tokens.mean
        if self.role == "generator" and self.modality is Modality.IMAGE:
            return request_class.mean_image_tokens
        if self.role in ("talker", "generator", "pair"):
            return request_class.mean_audio_tokens
        return 1.0

    def rate(self, tp, stats=None, capacity_bytes=None):
        """Work units per second of one saturated replica at ``tp``."""
        stats = stats or MixStats()
        free = None if capacity_bytes is None else capacity_bytes - self.weight_bytes / tp
        if self.role == "encoder":
            return encoder_rate(self.profiles["encoder"], tp)
        if self.role == "generator":
            return generator_rate(self.profiles["generator"], tp)
        if self.role == "monolith":
            busy = monolith_busy_ms(self.profiles, stats.mix, tp, free)
            return 1000.0 / busy if busy > 0 else 0.0
        if self.role == "pair":
            return min(self._talker_rate(tp, stats, free), generator_rate(self.profiles["generator"], tp))
        if self.role == "talker":
            return self._talker_rate(tp, stats, free)
        profile = self.profiles[self.role]
        inline_items = 0.0 if self.descriptors[0].unit_task.recv_embeds else stats.items
        return llm_rate(
            profile,
            tp,
            batch=profile.effective_batch(free, tp),
            prompt_tokens=stats.prompt_tokens,
            output_tokens=stats.output_tokens or None,
            items=inline_items,
        )

    def _talker_rate(self, tp, stats, free):
        talker = self.profiles["talker"]
        return llm_rate(
            talker,
            tp,
            batch=talker.effective_batch(free, tp),
            prompt_tokens=stats.audio_prompt_tokens,
            output_tokens=stats.audio_tokens or None,
        )


def monolith_busy_ms(components, mix, tp=1, free_bytes_per_gpu=None):
    """Mean compute-lock time one request holds on a monolithic replica.

    The thinker is amortized over its continuous batch; the talker runs
    batch-1 for the whole request and vocoding is serialized per chunk.
    """
    thinker = components["thinker"]
    activation = sum(p.activation_bytes_per_request for p in components.values())
    batch = thinker.max_batch
    if free_bytes_per_gpu is not None and activation > 0:
        batch = min(batch, int(max(free_bytes_per_gpu, 0) // (activation / tp)))
    if batch <= 0 or mix is None:
        return math.inf if batch <= 0 else thinker.step_ms(1, tp)
    encoder = components.get("encoder")
    talker = components.get("talker")
    generator = components.get("generator")

    def per_class(c):
        items = c.mean_items()
        output = c.output_tokens.mean
        busy = 0.0
        if items > 0:
            if encoder is not None:
                busy += encoder.encode_ms(items, tp)
            else:
                busy += thinker.inline_encode_ms(items) / thinker.speedup(tp)
        busy += thinker.step_ms(batch, tp) / batch * output
        busy += thinker.prefill_ms_per_token * c.prompt_tokens.mean / thinker.speedup(tp)
        if c.audio_output and talker is not None:
            audio = c.audio_tokens.mean
            raw = talker.prefill_ms_per_token * output + audio * (talker.decode_a_ms + talker.decode_b_ms)
            busy += raw / talker.speedup(tp)
            if generator is not None and audio > 0:
                busy += math.ceil(audio / generator.tokens_per_chunk) * generator.chunk_ms(tp)
        return busy

    return mix.expect(per_class)


def build_components(descriptors, profiles, uses=None, fuse_pairs=True):
    """Group descriptors into planner components, named by role."""
    uses = uses or {}
    talkers = {d.unit_task.model_id: d for d in descriptors if component_role(d.unit_task) == "talker"}
    generators = {
        d.unit_task.model_id: d
        for d in descriptors
        if component_role(d.unit_task) == "generator" and d.unit_task.modality is Modality.AUDIO
    }
    fused = set(talkers) & set(generators) if fuse_pairs else set()

    def profile_of(descriptor):
        profile = profiles.get(descriptor.profile_ref)
        if profile is None:
            raise ProfileError(f"profile {descriptor.profile_ref!r} is not loaded")
        return profile

    grouped = []
    for descriptor in descriptors:
        spec = descriptor.unit_task
        role = component_role(spec)
        if spec.model_id in fused and (role == "talker" or descriptor is generators[spec.model_id]):
            if role == "generator":
                continue
            pair = [descriptor, generators[spec.model_id]]
            grouped.append(
                ("pair", PAIR_NAME, pair, {"talker": profile_of(pair[0]), "generator": profile_of(pair[1])}, None)
            )
            continue
        if role == "monolith":
            try:
                parts = monolith_components(descriptor, profiles)
            except ExecutorFailure as err:
                raise ProfileError(err.message) from None
            grouped.append((role, role, [descriptor], parts, None))
        elif role == "encoder":
            grouped.append((role, f"encoder:{spec.modality.value}", [descriptor], {role: profile_of(descriptor)}, spec.modality))
        elif role == "generator" and spec.modality is not Modality.AUDIO:
            name = f"generator:{spec.modality.value}"
            grouped.append((role, name, [descriptor], {role: profile_of(descriptor)}, spec.modality))
        else:
            grouped.append((role, role, [descriptor], {role: profile_of(descriptor)}, None))

    grouped.sort(key=lambda g: (_ROLE_ORDER.index(g[0]), g[1], g[2][0].digest))
    components, seen = [], {}
    for role, base, members, parts, modality in grouped:
        seen[base] = seen.get(base, 0) + 1
        name = base if seen[base] == 1 else f"{base}#{seen[base]}"
        count = max(uses.get(d.digest, 1) for d in members)
        components.append(Component(name, role, members, parts, count, modality))
    return components


def component_demand(mix, components):
    """Work units per request for each component; unused components get 0."""
    demand = {}
    for component in components:
        demand[component.name] = component.uses * mix.expect(component.work)
    return demand


def capacity(component, tp_degree, replicas=1, mix=None, capacity_bytes=None):
    """Work units per second of ``replicas`` saturated replicas."""
    if tp_degree not in component.allowed_tp:
        raise PlannerInfeasible(
            f"{component.name} does not allow TP-{tp_degree} (allowed {component.allowed_tp})",
            component=component.name,
        )
    stats = mix if isinstance(mix, MixStats) else MixStats.from_mix(mix)
    return replicas * component.rate(tp_degree, stats, capacity_bytes)


def feasible_tp(component, pool):
    """TP degrees at which one replica fits on some node of the pool."""
    options = []
    for tp in component.allowed_tp:
        per_gpu = component.weight_bytes / tp
        if any(len(n.gpu_ids) >= tp and n.capacity_bytes >= per_gpu for n in pool.nodes):
            options.append(tp)
    if not options:
        raise PlannerInfeasible(
            f"{component.name} ({component.weight_bytes / GB:.1f} GB) fits at no allowed TP degree "
            f"{component.allowed_tp} on this pool",
            component=component.name,
            oom=True,
        )
    return options


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------


def pack(replicas, pool):
    """Exact placement of replicas onto nodes, or None when impossible.

    ``replicas`` is a list of (component index, tp, weight bytes per GPU).
    Returns one GPU-id list per replica (same order). Each replica stays on
    one node and takes that node's lowest free GPU ids.
    """
    nodes = pool.nodes
    if sum(tp for _, tp, _ in replicas) > pool.gpu_count:
        return None
    order = sorted(range(len(replicas)), key=lambda i: (-replicas[i][1], -replicas[i][2], replicas[i][0], i))
    free = [len(n.gpu_ids) for n in nodes]
    caps = [n.capacity_bytes for n in nodes]
    choice = [None] * len(order)
    dead = set()

    def place(k):
        if k == len(order):
            return True
        state = (k, tuple(sorted(zip(free, caps))))
        if state in dead:
            return False
        _, tp, weight = replicas[order[k]]
        tried = set()
        for j in range(len(nodes)):
            if free[j] < tp or caps[j] < weight or (free[j], caps[j]) in tried:
                continue
            tried.add((free[j], caps[j]))
            free[j] -= tp
            choice[k] = j
            if place(k + 1):
                return True
            free[j] += tp
        dead.add(state)
        return False

    if not place(0):
        return None
    cursor = [0] * len(nodes)
    gpus = [None] * len(replicas)
    for k, index in enumerate(order):
        j = choice[k]
        tp = replicas[index][1]
        ids = sorted(nodes[j].gpu_ids)
        gpus[index] = ids[cursor[j] : cursor[j] + tp]
        cursor[j] += tp
    return gpus


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def _rounded(value):
    return 1e18 if math.isinf(value) else round(value, 6)


@dataclass
class _Candidate:
    components: list
    tps: tuple
    counts: tuple
    placement: list
    rates: list
    demands: list

    @property
    def ratios(self):
        return [
            n * r / d if d > 0 else math.inf for n, r, d in zip(self.counts, self.rates, self.demands)
        ]

    @property
    def objective(self):
        return min(self.ratios)

    @property
    def gpus(self):
        return sum(n * tp for n, tp in zip(self.counts, self.tps))

    def key(self):
        """Smaller is better: objective, then fewer GPUs, then placement."""
        placement = tuple(tuple(tuple(g) for g in reps) for reps in self.placement)
        return (-_rounded(self.objective), self.gpus, placement)


class _Search:
    """Packing and scoring for one TP assignment."""

    def __init__(self, components, tps, pool, stats, demands):
        self.components = components
        self.tps = tuple(tps)
        self.pool = pool
        self.demands = [demands[c.name] for c in components]
        capacity_bytes = max(n.capacity_bytes for n in pool.nodes)
        self.rates = [c.rate(tp, stats, capacity_bytes) for c, tp in zip(components, self.tps)]
        self.weights = [c.weight_bytes / tp for c, tp in zip(components, self.tps)]
        self._cache = {}

    def place(self, counts):
        counts = tuple(counts)
        if counts not in self._cache:
            replicas = []
            for index, n in enumerate(counts):
                replicas.extend([(index, self.tps[index], self.weights[index])] * n)
            gpus = pack(replicas, self.pool)
            if gpus is None:
                self._cache[counts] = None
            else:
                placement, cursor = [], 0
                for n in counts:
                    placement.append(sorted(gpus[cursor : cursor + n]))
                    cursor += n
                self._cache[counts] = placement
        return self._cache[counts]

    def candidate(self, counts):
        placement = self.place(counts)
        if placement is None:
            return None
        return _Candidate(self.components, self.tps, tuple(counts), placement, self.rates, self.demands)

    def needed(self, target):
        counts = []
        for rate, demand in zip(self.rates, self.demands):
            if demand <= 0:
                counts.append(1)
            elif rate <= 0:
                return None
            else:
                counts.append(max(1, math.ceil(target * demand / rate - 1e-9)))
        return counts

    def greedy(self):
        """Binary search on the bottleneck target; the fewest replicas that reach it."""
        base = [1] * len(self.components)
        if self.place(base) is None:
            return None
        if any(r <= 0 < d for r, d in zip(self.rates, self.demands)):
            return self.candidate(base)
        positive = [i for i, d in enumerate(self.demands) if d > 0]
        targets = sorted(
            {
                k * self.rates[i] / self.demands[i]
                for i in positive
                for k in range(1, self.pool.gpu_count // self.tps[i] + 1)
            }
        )
        counts = base
        lo, hi = 0, len(targets) - 1
        while lo <= hi:
            mid = (lo + hi) // 2
            trial = self.needed(targets[mid])
            if self.place(trial) is not None:
                counts = trial
                lo = mid + 1
            else:
                hi = mid - 1
        return self.candidate(counts)

    def fill_spare(self, candidate):
        """Leximin water-filling of the GPUs ``candidate`` leaves free.

        The lowest-ratio component that still fits gets one more replica
        until nothing fits; components with zero demand never grow.
        """
        positive = [i for i, d in enumerate(self.demands) if d > 0]
        counts = list(candidate.counts)
        while True:
            ratios = [counts[i] * self.rates[i] / self.demands[i] for i in positive]
            order = sorted(zip(ratios, positive), key=lambda t: (_rounded(t[0]), self.components[t[1]].name))
            for _, i in order:
                trial = list(counts)
                trial[i] += 1
                if self.place(trial) is not None:
                    counts = trial
                    break
            else:
                break
        return self.candidate(counts)

    def exhaustive(self):
        best = None
        total = self.pool.gpu_count
        n = len(self.components)
        floor = [sum(self.tps[j] for j in range(i, n)) for i in range(n)] + [0]

        def walk(i, counts, used):
            nonlocal best
            if i == n:
                ratios = [c * r / d if d > 0 else math.inf for c, r, d in zip(counts, self.rates, self.demands)]
                if best is not None and _rounded(min(ratios)) < _rounded(best.objective):
                    return
                found = self.candidate(counts)
                if found is not None and (best is None or found.key() < best.key()):
                    best = found
                return
            tp = self.tps[i]
            for k in range(1, (total - used - floor[i + 1]) // tp + 1):
                walk(i + 1, counts + [k], used + k * tp)

        walk(0, [], 0)
        return best


def _best(components, pool, mix, exact=False, fill_spare=False):
    stats = MixStats.from_mix(mix)
    demands = component_demand(mix, components)
    options = [feasible_tp(c, pool) for c in components]
    best = None
    for tps in itertools.product(*options):
        search = _Search(components, tps, pool, stats, demands)
        found = search.exhaustive() if exact else search.greedy()
        if found is not None and (best is None or found.key() < best.key()):
            best = found
    if best is None:
        names = ", ".join(c.name for c in components)
        raise PlannerInfeasible(
            f"components [{names}] do not all fit on {pool.gpu_count} GPUs", component=components[-1].name
        )
    if fill_spare:
        search = _Search(components, best.tps, pool, stats, demands)
        filled = search.fill_spare(best)
        if filled.gpus > best.gpus:
            logger.info(
                "Filled %d spare GPUs (objective %.3f -> %.3f)", filled.gpus - best.gpus, best.objective, filled.objective
            )
        return filled
    return best


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass
class ComponentPlan:
    name: str
    role: str
    digests: list
    labels: list
    tp_degree: int
    replicas: list
    rate: float
    demand: float
    weight_bytes: int
    unit: str = "tokens"

    @property
    def capacity(self):
        return len(self.replicas) * self.rate

    @property
    def ratio(self):
        return self.capacity / self.demand if self.demand > 0 else None

    def to_dict(self):
        return {
            "name": self.name,
            "role": self.role,
            "digests": list(self.digests),
            "labels": list(self.labels),
            "tp_degree": self.tp_degree,
            "replicas": [list(g) for g in self.replicas],
            "rate": self.rate,
            "demand": self.demand,
            "capacity": self.capacity,
            "ratio": self.ratio,
            "weight_bytes": self.weight_bytes,
            "unit": self.unit,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=data["name"],
            role=data["role"],
            digests=list(data["digests"]),
            labels=list(data.get("labels", [])),
            tp_degree=int(data["tp_degree"]),
            replicas=[list(g) for g in data["replicas"]],
            rate=float(data["rate"]),
            demand=float(data["demand"]),
            weight_bytes=int(data["weight_bytes"]),
            unit=data.get("unit", "tokens"),
        )


@dataclass
class DeploymentPlan:
    mode: str
    components: list
    objective_value: float
    pool: PoolSpec
    mix_name: str = None
    exact: bool = False
    alternatives: dict = field(default_factory=dict)

    @classmethod
    def from_candidate(cls, candidate, pool, mix, mode, exact):
        components = []
        for component, tp, placement, rate, demand in zip(
            candidate.components, candidate.tps, candidate.placement, candidate.rates, candidate.demands
        ):
            components.append(
                ComponentPlan(
                    name=component.name,
                    role=component.role,
                    digests=component.digests,
                    labels=component.labels,
                    tp_degree=tp,
                    replicas=placement,
                    rate=rate,
                    demand=demand,
                    weight_bytes=component.weight_bytes,
                    unit=component.unit,
                )
            )
        objective = candidate.objective
        return cls(mode, components, objective, pool, getattr(mix, "name", None), exact)

    @property
    def gpus_used(self):
        return sum(c.tp_degree * len(c.replicas) for c in self.components)

    def component(self, name):
        for component in self.components:
            if component.name == name:
                return component
        raise KeyError(name)

    def placements(self):
        """digest -> list of (gpu ids, co-location group) per replica."""
        result = {}
        for component in self.components:
            for index, gpus in enumerate(component.replicas):
                group = f"{component.name}/{index}" if len(component.digests) > 1 else None
                for digest in component.digests:
                    result.setdefault(digest, []).append((list(gpus), group))
        return result

    def check(self):
        """Raise PlannerInfeasible if placement invariants do not hold."""
        used = set()
        for component in self.components:
            for gpus in component.replicas:
                if len(gpus) != component.tp_degree:
                    raise PlannerInfeasible(f"{component.name}: replica {gpus} is not TP-{component.tp_degree}")
                if used & set(gpus):
                    raise PlannerInfeasible(f"{component.name}: GPUs {sorted(used & set(gpus))} reused")
                used |= set(gpus)
                nodes = {id(self.pool.node_of(g)) for g in gpus}
                node = self.pool.node_of(gpus[0])
                if node is None or len(nodes) != 1:
                    raise PlannerInfeasible(f"{component.name}: replica {gpus} spans nodes")
                if component.weight_bytes / component.tp_degree > node.capacity_bytes:
                    raise PlannerInfeasible(f"{component.name}: weight exceeds GPU capacity", oom=True)
        return self

    def to_dict(self):
        objective = self.objective_value
        return {
            "mode": self.mode,
            "objective_value": None if math.isinf(objective) else objective,
            "gpus_used": self.gpus_used,
            "exact": self.exact,
            "mix": self.mix_name,
            "pool": self.pool.to_dict(),
            "components": [c.to_dict() for c in self.components],
            "alternatives": dict(self.alternatives),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        objective = data.get("objective_value")
        return cls(
            mode=data["mode"],
            components=[ComponentPlan.from_dict(c) for c in data["components"]],
            objective_value=math.inf if objective is None else float(objective),
            pool=PoolSpec.from_dict(data["pool"]),
            mix_name=data.get("mix"),
            exact=bool(data.get("exact", False)),
            alternatives=dict(data.get("alternatives", {})),
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self):
        """Text rendering: one row per node, one box per GPU."""
        owner = {}
        for component in self.components:
            for index, gpus in enumerate(component.replicas):
                for gpu in gpus:
                    owner[gpu] = f"{component.name}.{index}"
        width = max([len(v) for v in owner.values()] + [4]) + 2
        objective = "inf" if math.isinf(self.objective_value) else f"{self.objective_value:.3f}"
        lines = [f"plan: {self.mode}  objective {objective} req/s  GPUs {self.gpus_used}/{self.pool.gpu_count}"]
        for node in self.pool.nodes:
            boxes = "".join(f"[{owner.get(g, 'free'):^{width}}]" for g in sorted(node.gpu_ids))
            lines.append(f"{node.node_id:<8}{boxes}")
        for c in self.components:
            ratio = "-" if c.ratio is None else f"{c.ratio:.3f}"
            lines.append(
                f"  {c.name:<20} TP-{c.tp_degree} x{len(c.replicas):<3} rate {c.rate:10.2f} {c.unit}/s"
                f"  demand {c.demand:8.2f}  ratio {ratio}"
            )
        for mode, value in sorted(self.alternatives.items()):
            lines.append(f"  alternative {mode}: {'OOM' if value is None else f'{value:.3f} req/s'}")
        return "\n".join(lines)


def _plan(descriptors, profiles, mix, pool, uses=None, fuse_pairs=True, monolith=None, exact=False, fill_spare=False):
    if not pool.nodes or pool.gpu_count == 0:
        raise PlannerInfeasible("the GPU pool is empty")
    components = build_components(descriptors, profiles, uses, fuse_pairs)
    if exact:
        if pool.gpu_count > ORACLE_MAX_GPUS or len(components) > ORACLE_MAX_COMPONENTS:
            raise TractabilityError(
                f"oracle is limited to {ORACLE_MAX_GPUS} GPUs and {ORACLE_MAX_COMPONENTS} components "
                f"(got {pool.gpu_count} and {len(components)})"
            )
    fission = _best(components, pool, mix, exact, fill_spare)
    plan = DeploymentPlan.from_candidate(fission, pool, mix, "fission", exact)
    if len(components) == 1 and components[0].role == "monolith":
        plan.mode = "monolith"
    if monolith is not None:
        plan.alternatives["fission"] = plan.objective_value
        try:
            mono = _best(build_components([monolith], profiles), pool, mix, exact, fill_spare)
        except PlannerInfeasible as err:
            logger.info("Monolith candidate rejected: %s", err.message)
            plan.alternatives["monolith"] = None
        else:
            plan.alternatives["monolith"] = mono.objective
            if not _rounded(fission.objective) > _rounded(mono.objective):
                alternatives = plan.alternatives
                plan = DeploymentPlan.from_candidate(mono, pool, mix, "monolith", exact)
                plan.alternatives = alternatives
    logger.info(
        "Plan (%s%s): objective %.3f req/s on %d/%d GPUs",
        plan.mode,
        ", exact" if exact else "",
        plan.objective_value,
        plan.gpus_used,
        pool.gpu_count,
    )
    return plan.check()


def plan(descriptors, profiles, mix, pool, uses=None, fuse_pairs=True, monolith=None, fill_spare=False):
    """Max-min deployment plan for ``descriptors`` on ``pool``.

    ``monolith`` is an optional descriptor for the same model run as one
    unit; it is chosen only when fission does not beat it.

    Among plans with the best objective the one using the fewest GPUs wins,
    so GPUs that would not raise the objective stay free. ``fill_spare``
    hands those out afterwards to the lowest-ratio components.
    """
    return _plan(descriptors, profiles, mix, pool, uses, fuse_pairs, monolith, fill_spare=fill_spare)


def oracle_plan(descriptors, profiles, mix, pool, uses=None, fuse_pairs=True, monolith=None, fill_spare=False):
    """Same contract as plan(), by exhaustive enumeration of replica counts."""
    return _plan(descriptors, profiles, mix, pool, uses, fuse_pairs, monolith, exact=True, fill_spare=fill_spare)


# ---------------------------------------------------------------------------
# Apps
# ---------------------------------------------------------------------------


def default_mix(manifest):
    """One-class mix exercising every modality and output the app declares."""
    modalities, audio, image = set(), False, False
    for spec in manifest.tasks.values():
        if isinstance(spec, CompositeTaskSpec):
            modalities.update(spec.config.get("modalities", []))
            audio = audio or bool(spec.config.get("audio_output", spec.name == "OmniTask"))
            image = image or spec.name == "ImageGenTask"
    items = {m: {"count": 1} for m in sorted(modalities) if m != Modality.TEXT.value}
    data = {
        "name": f"{manifest.app_id}-default",
        "classes": [
            {
                "name": "default",
                "probability": 1.0,
                "prompt_tokens": 128,
                "output_tokens": 128,
                "items": items,
                "audio_output": audio,
                "audio_tokens": 200 if audio else 0,
                "image_output": image,
            }
        ],
    }
    return WorkloadMix.from_dict(data)


def monolith_variant(validated, catalog):
    """Descriptor for the app run unfissioned, when it is a single Omni app."""
    tasks = validated.manifest.tasks
    if len(tasks) != 1:
        return None
    (spec,) = tasks.values()
    if not isinstance(spec, CompositeTaskSpec) or spec.name != "OmniTask" or not spec.config.get("fission", True):
        return None
    config = dict(spec.config, fission=False)
    (unit,) = units_of(make_composite("OmniTask", config))
    return catalog.descriptor_for(unit)


def plan_app(
    validated, catalog, profiles, mix, pool, fuse_pairs=True, exact=False, consider_monolith=True, fill_spare=False
):
    """Plan every unit task of a validated manifest."""
    descriptors = [catalog.descriptor_for(unit) for unit in validated.units.values()]
    monolith = monolith_variant(validated, catalog) if consider_monolith else None
    if monolith is not None and canonical_hash(monolith.unit_task) in validated.units:
        monolith = None
    runner = oracle_plan if exact else plan
    return runner(
        descriptors,
        profiles,
        mix,
        pool,
        uses=validated.uses,
        fuse_pairs=fuse_pairs,
        monolith=monolith,
        fill_spare=fill_spare,
    )
