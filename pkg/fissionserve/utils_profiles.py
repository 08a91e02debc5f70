import enum
import json
import math
import logging

from pathlib import Path
from dataclasses import dataclass, field

from fissionserve.utils_errors import ProfileError, TaskValidationError
from fissionserve.utils_tasks import Modality, TaskClass, TaskDescriptor

logger = logging.getLogger("FissionServe")

DEFAULT_TP_SCALING = {1: 1.0, 2: 1.8, 4: 3.2, 8: 5.6}

GB = 1_000_000_000
MB = 1_000_000

DEFAULT_SHAPE_RULE = {
    "patch": 28,
    "hidden": 2048,
    "elem_bytes": 2,
    "video_fps": 2.0,
    "audio_tokens_per_second": 25.0,
    "samples_per_token": 1920,
    "pixels_per_latent": 16,
    "token_bytes": 4,
}


class ProfileKind(str, enum.Enum):
    ENCODER = "Encoder"
    LLM = "LLMPrefillDecode"
    TALKER = "AutoregressiveTalker"
    GENERATOR = "Generator"


@dataclass
class ComponentProfile:
    name: str
    kind: ProfileKind
    base_ms: float = 0.0
    per_item_ms: float = 0.0
    prefill_ms_per_token: float = 0.0
    decode_a_ms: float = 0.0
    decode_b_ms: float = 0.0
    max_batch: int = 1
    per_chunk_ms: float = 0.0
    tokens_per_chunk: int = 1
    stream_chunk_tokens: int = 1
    tp_scaling: dict = field(default_factory=lambda: dict(DEFAULT_TP_SCALING))
    activation_bytes_per_request: int = 0
    inline_encoder: dict = None

    def __post_init__(self):
        try:
            self.kind = ProfileKind(self.kind)
        except ValueError:
            raise ProfileError(f"profile {self.name}: unknown kind {self.kind!r}") from None
        self.tp_scaling = {int(k): float(v) for k, v in self.tp_scaling.items()}

    @property
    def is_autoregressive(self):
        return self.kind in (ProfileKind.LLM, ProfileKind.TALKER)

    def validate(self):
        errors = []
        if self.kind is ProfileKind.ENCODER:
            required = ("base_ms", "per_item_ms")
        elif self.is_autoregressive:
            required = ("decode_a_ms", "decode_b_ms")
            if self.max_batch < 1:
                errors.append("max_batch must be >= 1")
            if self.prefill_ms_per_token < 0:
                errors.append("prefill_ms_per_token must be >= 0")
            if self.stream_chunk_tokens < 1:
                errors.append("stream_chunk_tokens must be >= 1")
        else:
            required = ("per_chunk_ms",)
            if self.tokens_per_chunk < 1:
                errors.append("tokens_per_chunk must be >= 1")
        for name in required:
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be > 0")
        if self.tp_scaling.get(1) != 1.0:
            errors.append("tp_scaling[1] must be 1")
        previous = 0.0
        for tp in sorted(self.tp_scaling):
            speedup = self.tp_scaling[tp]
            if speedup < previous:
                errors.append("tp_scaling must be nondecreasing")
            if speedup > tp:
                errors.append(f"tp_scaling[{tp}] exceeds {tp}")
            previous = speedup
        if self.activation_bytes_per_request < 0:
            errors.append("activation_bytes_per_request must be >= 0")
        if errors:
            raise ProfileError(f"profile {self.name}: " + "; ".join(errors))
        return self

    def speedup(self, tp):
        if tp not in self.tp_scaling:
            raise ProfileError(f"profile {self.name} has no tp_scaling for TP-{tp}")
        return self.tp_scaling[tp]

    def encode_ms(self, items, tp=1):
        return (self.base_ms + self.per_item_ms * items) / self.speedup(tp)

    def inline_encode_ms(self, items):
        if not self.inline_encoder or items <= 0:
            return 0.0
        enc = self.inline_encoder
        return enc["base_ms"] + enc["per_item_ms"] * items

    def step_ms(self, batch, tp=1, prefill_ms=0.0):
        """One decode step for ``batch`` running requests plus joiner prefill."""
        raw = self.decode_a_ms + self.decode_b_ms * batch + prefill_ms
        return raw / self.speedup(tp)

    def chunk_ms(self, tp=1):
        return self.per_chunk_ms / self.speedup(tp)

    def effective_batch(self, free_bytes_per_gpu=None, tp=1):
        """max_batch, further limited by activation memory when it is known."""
        if free_bytes_per_gpu is None or self.activation_bytes_per_request <= 0:
            return self.max_batch
        per_gpu = self.activation_bytes_per_request / tp
        return max(0, min(self.max_batch, int(free_bytes_per_gpu // per_gpu)))

    def to_dict(self):
        body = {
            "kind": self.kind.value,
            "tp_scaling": {str(k): v for k, v in sorted(self.tp_scaling.items())},
            "activation_bytes_per_request": self.activation_bytes_per_request,
        }
        if self.kind is ProfileKind.ENCODER:
            body.update(base_ms=self.base_ms, per_item_ms=self.per_item_ms)
        elif self.is_autoregressive:
            body.update(
                prefill_ms_per_token=self.prefill_ms_per_token,
                decode_a_ms=self.decode_a_ms,
                decode_b_ms=self.decode_b_ms,
                max_batch=self.max_batch,
                stream_chunk_tokens=self.stream_chunk_tokens,
            )
            if self.inline_encoder:
                body["inline_encoder"] = dict(self.inline_encoder)
        else:
            body.update(per_chunk_ms=self.per_chunk_ms, tokens_per_chunk=self.tokens_per_chunk)
        return body


def profile_from_dict(name, data):
    known = set(ComponentProfile.__dataclass_fields__) - {"name"}
    unknown = set(data) - known - {"comment"}
    if unknown:
        raise ProfileError(f"profile {name}: unknown fields {sorted(unknown)}")
    kwargs = {k: v for k, v in data.items() if k in known}
    if "kind" not in kwargs:
        raise ProfileError(f"profile {name}: missing kind")
    return ComponentProfile(name=name, **kwargs).validate()


def load_profiles(paths):
    """Merge one or more profile files (JSON map name -> profile)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    profiles = {}
    for path in paths:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ProfileError(f"cannot read profile file {path}: {err}") from None
        for name, raw in data.items():
            if name.startswith("_"):
                continue
            if name in profiles:
                logger.debug("Profile %s overridden by %s", name, path)
            profiles[name] = profile_from_dict(name, raw)
        logger.debug("Loaded %d profiles from %s", len(data), path)
    return profiles


# ---------------------------------------------------------------------------
# Closed-form saturated rates (shared with the planner)
# ---------------------------------------------------------------------------


def encoder_rate(profile, tp=1, items_per_call=1):
    """Items per second of one replica."""
    return 1000.0 * items_per_call / profile.encode_ms(items_per_call, tp)


def llm_rate(profile, tp=1, batch=None, prompt_tokens=0.0, output_tokens=None, items=0.0):
    """Tokens per second of one saturated continuous-batching replica.

    Joiner prefill (and inline encoding) is amortized over the output length:
    in steady state ``batch / output_tokens`` requests join per step.
    """
    batch = profile.max_batch if batch is None else batch
    if batch <= 0:
        return 0.0
    joiners = batch / output_tokens if output_tokens else 0.0
    per_join = profile.prefill_ms_per_token * prompt_tokens
    per_join += profile.inline_encode_ms(items)
    step = profile.step_ms(batch, tp, prefill_ms=joiners * per_join)
    return 1000.0 * batch / step


def generator_rate(profile, tp=1):
    """Tokens per second consumed by one generator replica."""
    return 1000.0 * profile.tokens_per_chunk / profile.chunk_ms(tp)


# ---------------------------------------------------------------------------
# Payload shape rules
# ---------------------------------------------------------------------------


def embedding_shape(item, rule):
    """Embedding tensor shape an encoder produces for one media item."""
    patch = rule.get("patch", DEFAULT_SHAPE_RULE["patch"])
    hidden = rule.get("hidden", DEFAULT_SHAPE_RULE["hidden"])
    if item.modality is Modality.IMAGE:
        tokens = math.ceil(item.height / patch) * math.ceil(item.width / patch)
    elif item.modality is Modality.VIDEO:
        per_frame = math.ceil(item.height / patch) * math.ceil(item.width / patch)
        fps = rule.get("video_fps", DEFAULT_SHAPE_RULE["video_fps"])
        tokens = per_frame * math.ceil(item.seconds * fps)
    elif item.modality is Modality.AUDIO:
        rate = rule.get("audio_tokens_per_second", DEFAULT_SHAPE_RULE["audio_tokens_per_second"])
        tokens = math.ceil(item.seconds * rate)
    else:
        tokens = 0
    return [max(int(tokens), 1), int(hidden)]


def rule_value(rule, key):
    return rule.get(key, DEFAULT_SHAPE_RULE[key])


# ---------------------------------------------------------------------------
# Model catalog
# ---------------------------------------------------------------------------


@dataclass
class CatalogEntry:
    task_class: TaskClass
    model_id: str
    weight_bytes: int
    profile_ref: str
    allowed_tp_degrees: list
    role: str = None
    modality: Modality = None
    activation_profiles: list = field(default_factory=list)
    shape_rule: dict = field(default_factory=dict)

    def matches(self, spec, wildcard=False):
        if self.task_class is not spec.task_class:
            return False
        if self.model_id != spec.model_id and not (wildcard and self.model_id == "*"):
            return False
        if self.modality is not None and self.modality is not spec.modality:
            return False
        return self.role == spec.role


class ModelCatalog:
    """Resolves unit tasks to deployment descriptors."""

    def __init__(self, entries=None):
        self.entries = list(entries or [])

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ProfileError(f"cannot read catalog {path}: {err}") from None
        entries = []
        for raw in data.get("models", []):
            try:
                entries.append(
                    CatalogEntry(
                        task_class=TaskClass(raw["task_class"]),
                        model_id=raw["model_id"],
                        weight_bytes=int(raw["weight_bytes"]),
                        profile_ref=raw["profile"],
                        allowed_tp_degrees=list(raw.get("allowed_tp", [1])),
                        role=raw.get("role"),
                        modality=Modality(raw["modality"]) if raw.get("modality") else None,
                        activation_profiles=list(raw.get("components", [])),
                        shape_rule=dict(raw.get("shape_rule", {})),
                    )
                )
            except (KeyError, ValueError) as err:
                raise ProfileError(f"bad catalog entry {raw}: {err}") from None
        return cls(entries)

    def lookup(self, spec, quiet=False):
        for wildcard in (False, True):
            for entry in self.entries:
                if entry.matches(spec, wildcard=wildcard):
                    if wildcard and not quiet:
                        logger.warning(
                            "No catalog entry for %s %s; using default %s",
                            spec.task_class.value,
                            spec.model_id,
                            entry.profile_ref,
                        )
                    return entry
        raise TaskValidationError(
            f"no catalog entry for {spec.task_class.value} {spec.model_id!r} "
            f"(role={spec.role}, modality={spec.modality})"
        )

    def descriptor_for(self, spec):
        entry = self.lookup(spec)
        return TaskDescriptor(
            unit_task=spec,
            weight_bytes=entry.weight_bytes,
            profile_ref=entry.profile_ref,
            allowed_tp_degrees=frozenset(entry.allowed_tp_degrees),
            activation_profiles=tuple(entry.activation_profiles),
            shape_rule=dict(entry.shape_rule),
        )

    def shape_rule(self, spec):
        try:
            rule = dict(DEFAULT_SHAPE_RULE)
            rule.update(self.lookup(spec, quiet=True).shape_rule)
            return rule
        except TaskValidationError:
            return dict(DEFAULT_SHAPE_RULE)
