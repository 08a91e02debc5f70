import enum
import json
import uuid
import hashlib
import logging

from dataclasses import dataclass, field, replace

from fissionserve.utils_errors import (
    DuplicateAppError,
    FissionError,
    ManifestError,
    TaskValidationError,
)

logger = logging.getLogger("FissionServe")

SCALAR_TYPES = (str, int, float, bool)


class TaskClass(str, enum.Enum):
    ENCODER = "Encoder"
    LLM = "LLM"
    GENERATOR = "Generator"


class Modality(str, enum.Enum):
    TEXT = "Text"
    IMAGE = "Image"
    VIDEO = "Video"
    AUDIO = "Audio"


def _coerce_enum(enum_cls, value, what):
    if value is None or isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        raise TaskValidationError(f"unknown {what} {value!r}") from None


# ---------------------------------------------------------------------------
# Unit tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class UnitTaskSpec:
    """An atomic deployable component: one encoder, LLM or generator."""

    task_class: TaskClass
    model_id: str
    modality: Modality = None
    recv_embeds: bool = False
    emit_hidden_states: bool = False
    encoder_ids: frozenset = frozenset()
    extra_config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "task_class", _coerce_enum(TaskClass, self.task_class, "task class")
        )
        object.__setattr__(
            self, "modality", _coerce_enum(Modality, self.modality, "modality")
        )
        object.__setattr__(self, "encoder_ids", frozenset(self.encoder_ids or ()))
        object.__setattr__(self, "extra_config", dict(self.extra_config or {}))

    @classmethod
    def encoder(cls, encoder_ids, modality):
        """Encoder named after the smallest of its model ids so sharers agree."""
        ids = frozenset(encoder_ids)
        if not ids:
            raise TaskValidationError("encoder needs at least one encoder id")
        return cls(TaskClass.ENCODER, min(ids), modality=modality, encoder_ids=ids)

    @property
    def role(self):
        return self.extra_config.get("role")

    def validate(self):
        errors = []
        if not isinstance(self.model_id, str) or not self.model_id:
            errors.append("model_id must be a non-empty string")
        if self.task_class is TaskClass.ENCODER:
            if self.modality is None or self.modality is Modality.TEXT:
                errors.append("Encoder requires a non-Text modality")
            if not self.encoder_ids:
                errors.append("Encoder requires encoder_ids")
        elif self.encoder_ids:
            errors.append("encoder_ids is only valid on Encoder")
        if self.task_class is TaskClass.GENERATOR and self.modality is None:
            errors.append("Generator requires a modality")
        if self.task_class is TaskClass.LLM and self.modality is not None:
            errors.append("modality is not valid on LLM")
        if self.task_class is not TaskClass.LLM and (
            self.recv_embeds or self.emit_hidden_states
        ):
            errors.append("recv_embeds/emit_hidden_states are only valid on LLM")
        for key, value in self.extra_config.items():
            if not isinstance(key, str):
                errors.append(f"extra_config key {key!r} is not a string")
            if not isinstance(value, SCALAR_TYPES):
                errors.append(f"extra_config[{key!r}] must be a scalar")
        if errors:
            raise TaskValidationError(
                f"invalid {self.task_class.value} spec: " + "; ".join(errors)
            )
        return self

    def to_dict(self):
        return {
            "task_class": self.task_class.value,
            "model_id": self.model_id,
            "modality": self.modality.value if self.modality else None,
            "recv_embeds": self.recv_embeds,
            "emit_hidden_states": self.emit_hidden_states,
            "encoder_ids": sorted(self.encoder_ids),
            "extra_config": dict(self.extra_config),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                task_class=data["task_class"],
                model_id=data["model_id"],
                modality=data.get("modality"),
                recv_embeds=bool(data.get("recv_embeds", False)),
                emit_hidden_states=bool(data.get("emit_hidden_states", False)),
                encoder_ids=frozenset(data.get("encoder_ids") or ()),
                extra_config=data.get("extra_config") or {},
            )
        except KeyError as err:
            raise TaskValidationError(f"unit task missing field {err}") from None

    def __eq__(self, other):
        if not isinstance(other, UnitTaskSpec):
            return NotImplemented
        return canonical_bytes(self) == canonical_bytes(other)

    def __hash__(self):
        return hash(canonical_bytes(self))


def canonical_bytes(spec):
    """Deterministic serialization: sorted keys, sorted sets, compact JSON."""
    body = spec.to_dict()
    body["kind"] = "unit"
    return json.dumps(
        body, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def canonical_hash(spec):
    spec.validate()
    return hashlib.sha256(canonical_bytes(spec)).hexdigest()


def task_label(spec):
    """Short human label, e.g. ``E:Image``, ``L:thinker``, ``G:Audio``."""
    if spec.task_class is TaskClass.ENCODER:
        return f"E:{spec.modality.value}"
    if spec.task_class is TaskClass.GENERATOR:
        return f"G:{spec.modality.value}"
    return f"L:{spec.role or 'llm'}"


# ---------------------------------------------------------------------------
# Composite tasks
# ---------------------------------------------------------------------------

COMPOSITE_BUILDERS = {}


def register_composite(name):
    """Register a ``config -> children`` builder under a composite name."""

    def wrap(builder):
        COMPOSITE_BUILDERS[name] = builder
        return builder

    return wrap


@dataclass(eq=False)
class CompositeTaskSpec:
    name: str
    config: dict
    children: dict

    def to_dict(self):
        return {"composite": self.name, "config": dict(self.config)}


def _normalize_config(config):
    normalized = {}
    for key, value in (config or {}).items():
        if isinstance(value, (list, tuple)):
            if not all(isinstance(v, SCALAR_TYPES) for v in value):
                raise TaskValidationError(f"config[{key!r}] must hold scalars")
            normalized[key] = list(value)
        elif isinstance(value, SCALAR_TYPES):
            normalized[key] = value
        else:
            raise TaskValidationError(f"config[{key!r}] must be a scalar or list")
    return normalized


def make_composite(name, config):
    """Build a composite; children are derived from config alone."""
    builder = COMPOSITE_BUILDERS.get(name)
    if builder is None:
        raise TaskValidationError(f"unknown composite {name!r}")
    config = _normalize_config(config)
    try:
        children = builder(config)
    except KeyError as err:
        raise TaskValidationError(f"{name} config missing {err}") from None
    return CompositeTaskSpec(name=name, config=config, children=children)


def expand_composite(spec, _stack=None):
    """All unit tasks reachable from ``spec``, in child order."""
    if spec.name not in COMPOSITE_BUILDERS:
        raise TaskValidationError(f"unknown composite {spec.name!r}")
    stack = _stack or []
    if any(parent is spec for parent in stack):
        path = " -> ".join(s.name for s in stack + [spec])
        raise TaskValidationError(f"cyclic composite nesting: {path}")
    units = []
    for child in spec.children.values():
        if isinstance(child, CompositeTaskSpec):
            units.extend(expand_composite(child, stack + [spec]))
        else:
            units.append(child)
    return units


def _modalities(config):
    values = config.get("modalities", ["Image"])
    mods = []
    for value in values:
        mod = _coerce_enum(Modality, value, "modality")
        if mod is not Modality.TEXT and mod not in mods:
            mods.append(mod)
    return mods


@register_composite("MLLMTask")
def _mllm_children(config):
    model_id = config["model_id"]
    fission = bool(config.get("encoder_fission", True))
    encoder_ids = config.get("encoder_ids") or [model_id]
    children = {}
    if fission:
        for mod in _modalities(config):
            children[f"encoder_{mod.value.lower()}"] = UnitTaskSpec.encoder(
                encoder_ids, mod
            )
    children["llm"] = UnitTaskSpec(TaskClass.LLM, model_id, recv_embeds=fission)
    return children


@register_composite("OmniTask")
def _omni_children(config):
    model_id = config["model_id"]
    audio_output = bool(config.get("audio_output", True))
    if not config.get("fission", True):
        return {
            "monolith": UnitTaskSpec(
                TaskClass.LLM,
                model_id,
                extra_config={"role": "monolith", "audio_output": audio_output},
            )
        }
    encoder_fission = bool(config.get("encoder_fission", True))
    encoder_ids = config.get("encoder_ids") or [model_id]
    children = {}
    if encoder_fission:
        for mod in _modalities(config):
            children[f"encoder_{mod.value.lower()}"] = UnitTaskSpec.encoder(
                encoder_ids, mod
            )
    children["thinker"] = UnitTaskSpec(
        TaskClass.LLM,
        model_id,
        recv_embeds=encoder_fission,
        emit_hidden_states=audio_output,
        extra_config={"role": "thinker"},
    )
    if audio_output:
        children["talker"] = UnitTaskSpec(
            TaskClass.LLM, model_id, recv_embeds=True, extra_config={"role": "talker"}
        )
        children["generator"] = UnitTaskSpec(
            TaskClass.GENERATOR, model_id, modality=Modality.AUDIO
        )
    return children


@register_composite("ImageGenTask")
def _image_gen_children(config):
    model_id = config["model_id"]
    fission = bool(config.get("encoder_fission", True))
    encoder_ids = config.get("encoder_ids") or [model_id]
    children = {}
    if fission:
        for mod in _modalities(config):
            children[f"encoder_{mod.value.lower()}"] = UnitTaskSpec.encoder(
                encoder_ids, mod
            )
    # latents are the hidden states of the decoded image tokens
    children["llm"] = UnitTaskSpec(
        TaskClass.LLM, model_id, recv_embeds=fission, emit_hidden_states=True
    )
    children["generator"] = UnitTaskSpec(
        TaskClass.GENERATOR, config.get("generator_id") or model_id, modality=Modality.IMAGE
    )
    return children


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


@dataclass
class TaskDescriptor:
    """How to deploy a unit task: weights, profile and legal TP degrees."""

    unit_task: UnitTaskSpec
    weight_bytes: int
    profile_ref: str
    allowed_tp_degrees: frozenset
    activation_profiles: tuple = ()
    shape_rule: dict = field(default_factory=dict)

    def __post_init__(self):
        self.allowed_tp_degrees = frozenset(int(t) for t in self.allowed_tp_degrees)
        if not self.allowed_tp_degrees:
            raise TaskValidationError("allowed_tp_degrees must be nonempty")
        if self.weight_bytes <= 0:
            raise TaskValidationError("weight_bytes must be positive")

    @property
    def digest(self):
        return canonical_hash(self.unit_task)

    def to_dict(self):
        return {
            "unit_task": self.unit_task.to_dict(),
            "weight_bytes": self.weight_bytes,
            "profile_ref": self.profile_ref,
            "allowed_tp_degrees": sorted(self.allowed_tp_degrees),
            "activation_profiles": list(self.activation_profiles),
            "shape_rule": dict(self.shape_rule),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            unit_task=UnitTaskSpec.from_dict(data["unit_task"]),
            weight_bytes=int(data["weight_bytes"]),
            profile_ref=data["profile_ref"],
            allowed_tp_degrees=frozenset(data["allowed_tp_degrees"]),
            activation_profiles=tuple(data.get("activation_profiles", ())),
            shape_rule=dict(data.get("shape_rule", {})),
        )


# ---------------------------------------------------------------------------
# Request values
# ---------------------------------------------------------------------------


@dataclass
class MediaItem:
    modality: Modality
    width: int = 0
    height: int = 0
    seconds: float = 0.0

    def __post_init__(self):
        self.modality = _coerce_enum(Modality, self.modality, "modality")

    @property
    def raw_bytes(self):
        if self.modality is Modality.IMAGE:
            return self.width * self.height * 3
        if self.modality is Modality.VIDEO:
            return int(self.width * self.height * 3 * max(self.seconds, 0.0) * 2)
        if self.modality is Modality.AUDIO:
            return int(16000 * 2 * max(self.seconds, 0.0))
        return 0

    def to_dict(self):
        return {
            "modality": self.modality.value,
            "width": self.width,
            "height": self.height,
            "seconds": self.seconds,
        }


@dataclass
class ChatRequest:
    request_id: str = ""
    prompt_tokens: int = 32
    output_tokens: int = 64
    items: list = field(default_factory=list)
    audio_output: bool = False
    audio_tokens: int = 0
    image_output: bool = False
    class_name: str = "default"
    multimodal_embeddings: list = field(default_factory=list)

    def __post_init__(self):
        if not self.request_id:
            self.request_id = uuid.uuid4().hex[:12]

    def copy(self):
        return replace(self, items=list(self.items), multimodal_embeddings=[])

    def multimodal_items(self):
        return [item for item in self.items if item.modality is not Modality.TEXT]

    def summary(self):
        """Literal form carried in dispatch messages."""
        body = {
            "request_id": self.request_id,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "audio_output": self.audio_output,
            "audio_tokens": self.audio_tokens,
            "items": [item.to_dict() for item in self.multimodal_items()],
        }
        if self.image_output:
            body["image_output"] = True
        return body

    def to_dict(self):
        body = self.summary()
        body["class_name"] = self.class_name
        return body

    @classmethod
    def from_dict(cls, data):
        items = []
        for raw in data.get("items", []):
            items.append(
                MediaItem(
                    modality=raw["modality"],
                    width=int(raw.get("width", 0)),
                    height=int(raw.get("height", 0)),
                    seconds=float(raw.get("seconds", 0.0)),
                )
            )
        prompt_tokens = data.get("prompt_tokens")
        if prompt_tokens is None:
            prompt_tokens = max(1, len(str(data.get("prompt", "")).split()))
        return cls(
            request_id=data.get("request_id", ""),
            prompt_tokens=int(prompt_tokens),
            output_tokens=int(data.get("output_tokens", 64)),
            items=items,
            audio_output=bool(data.get("audio_output", False)),
            audio_tokens=int(data.get("audio_tokens", 0)),
            image_output=bool(data.get("image_output", False)),
            class_name=data.get("class_name", "default"),
        )


# ---------------------------------------------------------------------------
# Apps
# ---------------------------------------------------------------------------

SERVE_ROUTINES = {}


def register_serve_routine(routine):
    instance = routine() if isinstance(routine, type) else routine
    SERVE_ROUTINES[instance.name] = instance
    return routine


@dataclass
class AppManifest:
    app_id: str
    tasks: dict
    serve_entry: str

    def to_dict(self):
        tasks = {}
        for name, spec in self.tasks.items():
            if isinstance(spec, CompositeTaskSpec):
                tasks[name] = spec.to_dict()
            else:
                tasks[name] = {"unit": spec.to_dict()}
        return {"app_id": self.app_id, "tasks": tasks, "serve_entry": self.serve_entry}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        errors = []
        for key in ("app_id", "tasks", "serve_entry"):
            if key not in data:
                errors.append(f"missing top-level key {key!r}")
        if errors:
            raise ManifestError(errors)
        tasks = {}
        for name, raw in (data["tasks"] or {}).items():
            try:
                if "composite" in raw:
                    tasks[name] = make_composite(raw["composite"], raw.get("config", {}))
                elif "unit" in raw:
                    tasks[name] = UnitTaskSpec.from_dict(raw["unit"])
                else:
                    errors.append(f"task {name!r} needs 'composite' or 'unit'")
            except FissionError as err:
                errors.append(f"task {name!r}: {err.message}")
        if errors:
            raise ManifestError(errors)
        return cls(app_id=data["app_id"], tasks=tasks, serve_entry=data["serve_entry"])

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ManifestError(f"manifest is not valid JSON: {err}") from None
        return cls.from_dict(data)


@dataclass
class ValidatedManifest:
    manifest: AppManifest
    units: dict
    task_units: dict
    uses: dict

    @property
    def app_id(self):
        return self.manifest.app_id


def units_of(spec):
    if isinstance(spec, CompositeTaskSpec):
        return expand_composite(spec)
    return [spec]


def validate_manifest(manifest, existing_app_ids=()):
    """Expand every task, dedup unit tasks by digest, and check the entry."""
    if manifest.app_id and manifest.app_id in existing_app_ids:
        raise DuplicateAppError(f"duplicate app {manifest.app_id!r}")
    errors = []
    if not manifest.app_id:
        errors.append("app_id must be non-empty")
    if not manifest.tasks:
        errors.append("no tasks")
    routine = SERVE_ROUTINES.get(manifest.serve_entry)
    if routine is None:
        errors.append(f"unknown serve_entry {manifest.serve_entry!r}")
    elif manifest.tasks:
        errors.extend(routine.check(manifest.tasks))

    units, task_units, uses = {}, {}, {}
    for name, spec in manifest.tasks.items():
        try:
            digests = []
            for unit in units_of(spec):
                digest = canonical_hash(unit)
                units.setdefault(digest, unit)
                digests.append(digest)
            task_units[name] = digests
            for digest in set(digests):
                uses[digest] = uses.get(digest, 0) + 1
        except FissionError as err:
            errors.append(f"task {name!r}: {err.message}")
    if errors:
        raise ManifestError(errors)
    logger.debug(
        "Validated app %s: %d tasks, %d unit tasks",
        manifest.app_id,
        len(manifest.tasks),
        len(units),
    )
    return ValidatedManifest(manifest, units, task_units, uses)
