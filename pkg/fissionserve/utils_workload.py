import json
import math
import logging

from pathlib import Path
from dataclasses import dataclass, field

import numpy as np

from fissionserve.utils_errors import MixError
from fissionserve.utils_tasks import ChatRequest, MediaItem, Modality

logger = logging.getLogger("FissionServe")


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Distribution:
    """A sampled per-request quantity: fixed, poisson, uniform, lognormal or exponential."""

    kind: str
    value: float = 0.0
    low: float = 0.0
    high: float = 0.0
    sigma: float = 0.0

    KINDS = ("fixed", "poisson", "uniform", "lognormal", "exponential")

    @classmethod
    def parse(cls, raw, what="value"):
        if isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return cls("fixed", value=float(raw))
        if not isinstance(raw, dict) or raw.get("dist", "fixed") not in cls.KINDS:
            raise MixError(f"{what}: expected a number or {{'dist': one of {', '.join(cls.KINDS)}}}")
        kind = raw.get("dist", "fixed")
        if kind == "uniform":
            low, high = float(raw["low"]), float(raw["high"])
            if high < low:
                raise MixError(f"{what}: uniform high < low")
            return cls(kind, low=low, high=high)
        value = float(raw.get("value", raw.get("mean", 0.0)))
        if value < 0:
            raise MixError(f"{what}: mean must be >= 0")
        return cls(kind, value=value, sigma=float(raw.get("sigma", 0.0)))

    @property
    def mean(self):
        if self.kind == "uniform":
            return (self.low + self.high) / 2.0
        return self.value

    def sample(self, rng):
        if self.kind == "fixed":
            return self.value
        if self.kind == "poisson":
            return float(rng.poisson(self.value))
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "exponential":
            return float(rng.exponential(self.value)) if self.value > 0 else 0.0
        if self.value <= 0:
            return 0.0
        # parameterized by its arithmetic mean
        mu = math.log(self.value) - self.sigma**2 / 2.0
        return float(rng.lognormal(mu, self.sigma))

    def to_dict(self):
        if self.kind == "uniform":
            return {"dist": "uniform", "low": self.low, "high": self.high}
        body = {"dist": self.kind, "mean": self.value}
        if self.kind == "lognormal":
            body["sigma"] = self.sigma
        return body


@dataclass
class ItemSpec:
    count: Distribution
    width: Distribution
    height: Distribution
    seconds: Distribution

    @classmethod
    def parse(cls, raw, what):
        return cls(
            count=Distribution.parse(raw.get("count", 1), f"{what}.count"),
            width=Distribution.parse(raw.get("width", 448), f"{what}.width"),
            height=Distribution.parse(raw.get("height", 448), f"{what}.height"),
            seconds=Distribution.parse(raw.get("seconds", 0), f"{what}.seconds"),
        )

    def to_dict(self):
        return {
            "count": self.count.to_dict(),
            "width": self.width.to_dict(),
            "height": self.height.to_dict(),
            "seconds": self.seconds.to_dict(),
        }


@dataclass
class RequestClass:
    name: str
    probability: float
    prompt_tokens: Distribution
    output_tokens: Distribution
    items: dict = field(default_factory=dict)
    audio_output: bool = False
    audio_tokens: Distribution = field(default_factory=lambda: Distribution("fixed"))
    image_output: bool = False
    components: list = field(default_factory=list)

    @classmethod
    def parse(cls, raw):
        name = raw.get("name", "default")
        items = {}
        for modality, spec in (raw.get("items") or {}).items():
            try:
                mod = Modality(modality)
            except ValueError:
                raise MixError(f"class {name}: unknown modality {modality!r}") from None
            if mod is Modality.TEXT:
                continue
            items[mod] = ItemSpec.parse(spec, f"{name}.items.{modality}")
        return cls(
            name=name,
            probability=float(raw.get("probability", 1.0)),
            prompt_tokens=Distribution.parse(raw.get("prompt_tokens", 32), f"{name}.prompt_tokens"),
            output_tokens=Distribution.parse(raw.get("output_tokens", 64), f"{name}.output_tokens"),
            items=items,
            audio_output=bool(raw.get("audio_output", False)),
            audio_tokens=Distribution.parse(raw.get("audio_tokens", 0), f"{name}.audio_tokens"),
            image_output=bool(raw.get("image_output", False)),
            components=list(raw.get("components", [])),
        )

    def mean_items(self, modality=None):
        if modality is not None:
            spec = self.items.get(Modality(modality))
            return spec.count.mean if spec else 0.0
        return sum(spec.count.mean for spec in self.items.values())

    @property
    def mean_audio_tokens(self):
        return self.audio_tokens.mean if self.audio_output else 0.0

    @property
    def mean_image_tokens(self):
        return self.output_tokens.mean if self.image_output else 0.0

    def sample(self, rng, request_id):
        items = []
        for modality, spec in self.items.items():
            for _ in range(int(round(spec.count.sample(rng)))):
                items.append(
                    MediaItem(
                        modality=modality,
                        width=max(1, int(round(spec.width.sample(rng)))),
                        height=max(1, int(round(spec.height.sample(rng)))),
                        seconds=max(0.0, spec.seconds.sample(rng)),
                    )
                )
        audio_tokens = 0
        if self.audio_output:
            audio_tokens = max(1, int(round(self.audio_tokens.sample(rng))))
        return ChatRequest(
            request_id=request_id,
            prompt_tokens=max(1, int(round(self.prompt_tokens.sample(rng)))),
            output_tokens=max(1, int(round(self.output_tokens.sample(rng)))),
            items=items,
            audio_output=self.audio_output,
            audio_tokens=audio_tokens,
            image_output=self.image_output,
            class_name=self.name,
        )

    def to_dict(self):
        body = {
            "name": self.name,
            "probability": self.probability,
            "prompt_tokens": self.prompt_tokens.to_dict(),
            "output_tokens": self.output_tokens.to_dict(),
            "items": {mod.value: spec.to_dict() for mod, spec in self.items.items()},
            "audio_output": self.audio_output,
            "audio_tokens": self.audio_tokens.to_dict(),
        }
        if self.image_output:
            body["image_output"] = True
        if self.components:
            body["components"] = list(self.components)
        return body


@dataclass
class WorkloadMix:
    name: str
    classes: list

    def __post_init__(self):
        if not self.classes:
            raise MixError(f"mix {self.name} has no request classes")
        total = sum(c.probability for c in self.classes)
        if any(c.probability < 0 for c in self.classes) or abs(total - 1.0) > 1e-6:
            raise MixError(f"mix {self.name}: class probabilities sum to {total:.6f}, not 1")

    @classmethod
    def from_dict(cls, data):
        return cls(name=data.get("name", "mix"), classes=[RequestClass.parse(raw) for raw in data.get("classes", [])])

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise MixError(f"cannot read mix file {path}: {err}") from None
        data.setdefault("name", Path(path).stem)
        return cls.from_dict(data)

    def to_dict(self):
        return {"name": self.name, "classes": [c.to_dict() for c in self.classes]}

    @property
    def probabilities(self):
        return np.array([c.probability for c in self.classes], dtype=float)

    def expect(self, fn):
        """Probability-weighted mean of ``fn(request_class)``."""
        return sum(c.probability * fn(c) for c in self.classes)


# ---------------------------------------------------------------------------
# Arrival schedules
# ---------------------------------------------------------------------------


@dataclass
class Arrival:
    time_ms: float
    request: ChatRequest


def generate_workload(mix, rate, duration, seed=0):
    """Poisson arrivals at ``rate`` req/s for ``duration`` seconds.

    Every random draw comes from one generator seeded by ``seed``, so the
    same inputs always give the same schedule.
    """
    if rate <= 0:
        raise MixError("rate must be > 0")
    rng = np.random.default_rng(seed)
    horizon = duration * 1000.0
    schedule = []
    now = 0.0
    index = 0
    while True:
        now += rng.exponential(1000.0 / rate)
        if now >= horizon:
            break
        request_class = mix.classes[rng.choice(len(mix.classes), p=mix.probabilities)]
        request = request_class.sample(rng, f"req-{seed}-{index:06d}")
        schedule.append(Arrival(now, request))
        index += 1
    logger.info("Generated %d arrivals over %.1fs at %.2f req/s (seed %d)", len(schedule), duration, rate, seed)
    return schedule


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass
class RequestTrace:
    """Timeline of one request, filled from its dispatch record."""

    request_id: str
    class_name: str = "default"
    arrival: float = 0.0
    dispatch: float = None
    completion: float = None
    invocations: dict = field(default_factory=dict)
    error: str = None

    @property
    def latency(self):
        if self.completion is None:
            return None
        return self.completion - self.arrival

    @property
    def ok(self):
        return self.completion is not None and self.error is None

    def fill(self, record):
        self.dispatch = record.dispatched_at
        for invocation_id, node in record.graph.nodes.items():
            stamps = record.timestamps.get(invocation_id, {})
            self.invocations[invocation_id] = {
                "label": node.label,
                "replica": record.assignments[invocation_id].replica_id,
                "status": record.statuses[invocation_id].value,
                "queue_enter": stamps.get("queue_enter"),
                "compute_start": stamps.get("compute_start"),
                "compute_end": stamps.get("compute_end"),
                "transfer_ms": record.transfer_ms.get(invocation_id, 0.0),
            }
        self.completion = record.finished_at
        error = record.first_error()
        if error is not None:
            self.error = error.code
        return self

    def to_dict(self):
        return {
            "request_id": self.request_id,
            "class_name": self.class_name,
            "arrival": self.arrival,
            "dispatch": self.dispatch,
            "completion": self.completion,
            "latency": self.latency,
            "error": self.error,
            "invocations": self.invocations,
        }
