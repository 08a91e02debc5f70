import os
import sys
import json
import enum
import logging

from pathlib import Path
from dataclasses import dataclass, field

from fissionserve.utils_errors import ConfigError
from fissionserve.utils_profiles import GB
from fissionserve.utils_clock import ClockMode
from fissionserve.utils_sidecar import DEFAULT_CHUNK_BYTES
from fissionserve.utils_planner import NodeSpec, PoolSpec

logger = logging.getLogger("FissionServe")

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_PROFILES = [
    str(REPO_ROOT / "profiles" / "qwen3-omni.json"),
    str(REPO_ROOT / "profiles" / "qwen25-omni.json"),
    str(REPO_ROOT / "profiles" / "mllm.json"),
    str(REPO_ROOT / "profiles" / "imagegen.json"),
]
DEFAULT_CATALOG = str(REPO_ROOT / "profiles" / "catalog.json")
DEFAULT_CONFIG_FILE = "cluster.json"

LOG_FORMAT = "\033[1;32m%(levelname)-5s %(module)s:%(funcName)s():"
LOG_FORMAT += "%(lineno)d %(asctime)s\033[0m| %(message)s"


class ExecutorMode(str, enum.Enum):
    IN_PROCESS = "InProcess"
    MULTI_PROCESS = "MultiProcess"


@dataclass
class NodeConfig:
    node_id: str
    gpus: int
    gpu_capacity_bytes: int = 80 * GB


@dataclass
class ClusterConfig:
    nodes: list = field(
        default_factory=lambda: [NodeConfig("node0", 8), NodeConfig("node1", 8)]
    )
    executor_mode: ExecutorMode = ExecutorMode.IN_PROCESS
    clock: ClockMode = ClockMode.REALTIME
    clock_speed: float = 1.0
    arena_bytes: int = 64 * 1024 * 1024
    host: str = "127.0.0.1"
    ports: dict = field(
        default_factory=lambda: {"gateway": 8470, "sidecar_base": 18000, "executor_base": 19000}
    )
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    transfer: dict = field(default_factory=dict)
    forward_payloads: bool = False
    placement_policy: str = "planner"
    dispatch_policy: str = "least_outstanding"
    fuse_pairs: bool = True
    mix: str = None
    profiles: list = field(default_factory=lambda: list(DEFAULT_PROFILES))
    catalog: str = DEFAULT_CATALOG
    registry_path: str = None
    dispatch_timeout_ms: float = None
    orphan_timeout_s: float = 60.0
    backpressure_timeout_s: float = 30.0

    def __post_init__(self):
        self.nodes = [n if isinstance(n, NodeConfig) else _node(n) for n in self.nodes]
        self.ports = dict(self.ports)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        errors = []
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known - {"comment"})
        if unknown:
            errors.append(f"unknown fields {unknown}")
        try:
            if "executor_mode" in data:
                data["executor_mode"] = ExecutorMode(data["executor_mode"])
        except ValueError:
            errors.append(f"executor_mode must be one of {[m.value for m in ExecutorMode]}")
        try:
            if "clock" in data:
                data["clock"] = ClockMode(data["clock"])
        except ValueError:
            errors.append(f"clock must be one of {[m.value for m in ClockMode]}")
        if errors:
            raise ConfigError(errors)
        defaults = cls()
        ports = dict(defaults.ports)
        ports.update(data.pop("ports", None) or {})
        kwargs = {k: v for k, v in data.items() if k in known}
        try:
            config = cls(ports=ports, **kwargs)
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"bad node entry: {err}") from None
        return config.validate()

    @classmethod
    def load(cls, path=None, env=None):
        """Read ``path`` (or $FISSION_CONFIG, or ./cluster.json), then apply env."""
        env = os.environ if env is None else env
        path = path or env.get("FISSION_CONFIG")
        if path is None and Path(DEFAULT_CONFIG_FILE).exists():
            path = DEFAULT_CONFIG_FILE
        if path is None:
            config = cls()
        else:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as err:
                raise ConfigError(f"cannot read config {path}: {err}") from None
            config = cls.from_dict(data)
            logger.info("Loaded cluster config from %s", path)
        return config.apply_env(env).validate()

    def apply_env(self, env):
        overrides = {
            "FISSION_GATEWAY_PORT": "gateway",
            "FISSION_SIDECAR_PORT_BASE": "sidecar_base",
            "FISSION_EXECUTOR_PORT_BASE": "executor_base",
        }
        for name, key in overrides.items():
            if env.get(name):
                try:
                    self.ports[key] = int(env[name])
                except ValueError:
                    raise ConfigError(f"{name} must be an integer, got {env[name]!r}") from None
        return self

    # -- validation ---------------------------------------------------------

    def validate(self):
        errors = []
        if not self.nodes:
            errors.append("at least one node is required")
        seen = set()
        for node in self.nodes:
            if node.node_id in seen:
                errors.append(f"duplicate node id {node.node_id!r}")
            seen.add(node.node_id)
            if node.gpus <= 0:
                errors.append(f"node {node.node_id} must have > 0 GPUs")
            if node.gpu_capacity_bytes <= 0:
                errors.append(f"node {node.node_id} gpu_capacity_bytes must be > 0")
        if self.nodes and self.gpu_count == 0:
            errors.append("the cluster has 0 GPUs")
        if self.placement_policy not in ("planner", "minimal"):
            errors.append("placement_policy must be 'planner' or 'minimal'")
        if self.dispatch_policy not in ("least_outstanding", "locality"):
            errors.append("dispatch_policy must be 'least_outstanding' or 'locality'")
        if self.clock_speed <= 0:
            errors.append("clock_speed must be > 0")
        if self.chunk_bytes <= 0:
            errors.append("chunk_bytes must be > 0")
        if self.arena_bytes <= 0:
            errors.append("arena_bytes must be > 0")
        if self.executor_mode is ExecutorMode.MULTI_PROCESS and self.clock is not ClockMode.REALTIME:
            errors.append("MultiProcess executors need the RealTime clock")
        missing = {"gateway", "sidecar_base", "executor_base"} - set(self.ports)
        if missing:
            errors.append(f"ports missing {sorted(missing)}")
        else:
            gpus = max(self.gpu_count, 1)
            ranges = {
                "gateway": (self.ports["gateway"], self.ports["gateway"] + 1),
                "sidecar_base": (self.ports["sidecar_base"], self.ports["sidecar_base"] + gpus),
                "executor_base": (self.ports["executor_base"], self.ports["executor_base"] + gpus),
            }
            for name, (lo, hi) in ranges.items():
                if not 0 < lo < hi <= 65536:
                    errors.append(f"port range {name} [{lo}, {hi}) is out of bounds")
            names = sorted(ranges)
            for i, a in enumerate(names):
                for b in names[i + 1 :]:
                    (lo_a, hi_a), (lo_b, hi_b) = ranges[a], ranges[b]
                    if lo_a < hi_b and lo_b < hi_a:
                        errors.append(f"port ranges {a} and {b} overlap")
        if errors:
            raise ConfigError(errors)
        return self

    # -- derived ------------------------------------------------------------

    @property
    def gpu_count(self):
        return sum(max(n.gpus, 0) for n in self.nodes)

    def pool_spec(self):
        nodes, next_gpu = [], 0
        for node in self.nodes:
            nodes.append(NodeSpec(node.node_id, list(range(next_gpu, next_gpu + node.gpus)), node.gpu_capacity_bytes))
            next_gpu += node.gpus
        return PoolSpec(nodes)

    def gpu_nodes(self):
        """gpu id -> node id, numbering GPUs across nodes in order."""
        return {gpu: node.node_id for node in self.pool_spec().nodes for gpu in node.gpu_ids}

    def sidecar_port(self, gpu_id):
        return self.ports["sidecar_base"] + gpu_id

    def executor_port(self, gpu_id):
        return self.ports["executor_base"] + gpu_id

    @property
    def gateway_url(self):
        return f"http://{self.host}:{self.ports['gateway']}"

    def to_dict(self):
        return {
            "nodes": [
                {"node_id": n.node_id, "gpus": n.gpus, "gpu_capacity_bytes": n.gpu_capacity_bytes}
                for n in self.nodes
            ],
            "executor_mode": self.executor_mode.value,
            "clock": self.clock.value,
            "clock_speed": self.clock_speed,
            "arena_bytes": self.arena_bytes,
            "host": self.host,
            "ports": dict(self.ports),
            "chunk_bytes": self.chunk_bytes,
            "transfer": dict(self.transfer),
            "forward_payloads": self.forward_payloads,
            "placement_policy": self.placement_policy,
            "dispatch_policy": self.dispatch_policy,
            "fuse_pairs": self.fuse_pairs,
            "mix": self.mix,
            "profiles": list(self.profiles),
            "catalog": self.catalog,
            "registry_path": self.registry_path,
            "dispatch_timeout_ms": self.dispatch_timeout_ms,
            "orphan_timeout_s": self.orphan_timeout_s,
            "backpressure_timeout_s": self.backpressure_timeout_s,
        }


def _node(raw):
    return NodeConfig(
        node_id=str(raw["node_id"]),
        gpus=int(raw["gpus"]),
        gpu_capacity_bytes=int(raw.get("gpu_capacity_bytes", 80 * GB)),
    )


def configure_logging(level=None, env=None):
    """Attach the colored stdout handler to the FissionServe logger once."""
    env = os.environ if env is None else env
    level = (level or env.get("FISSION_LOG_LEVEL") or "INFO").upper()
    root = logging.getLogger("FissionServe")
    root.setLevel(level)
    if not any(getattr(h, "_fission", False) for h in root.handlers):
        shandler = logging.StreamHandler(sys.stdout)
        shandler.setFormatter(logging.Formatter(LOG_FORMAT))
        shandler._fission = True
        root.addHandler(shandler)
    return root
