import enum
import math
import logging
import contextvars

from collections import namedtuple
from dataclasses import dataclass

from fissionserve.utils_errors import (
    DanglingReferenceError,
    DeterminismViolation,
    DispatchError,
    FissionError,
    GraphValidationError,
    PlaceholderAccessError,
    RecordingError,
    TaskValidationError,
)
from fissionserve.utils_profiles import DEFAULT_SHAPE_RULE, embedding_shape, rule_value
from fissionserve.utils_tasks import (
    CompositeTaskSpec,
    Modality,
    TaskClass,
    canonical_hash,
    task_label,
)

logger = logging.getLogger("FissionServe")

CLIENT_INPUT = "client-input"

Edge = namedtuple("Edge", ["producer", "output_index", "consumer", "input_position"])

_ACTIVE = contextvars.ContextVar("fissionserve_session", default=None)

COMPOSITE_LOGIC = {}


def register_logic(name):
    def wrap(cls):
        COMPOSITE_LOGIC[name] = cls
        return cls

    return wrap


class RefState(str, enum.Enum):
    PLACEHOLDER = "Placeholder"
    MATERIALIZED = "Materialized"


@dataclass
class PayloadDesc:
    shape: list
    elem_bytes: int

    @property
    def total_bytes(self):
        return math.prod(self.shape) * self.elem_bytes

    def to_dict(self):
        return {
            "shape": list(self.shape),
            "elem_bytes": self.elem_bytes,
            "total_bytes": self.total_bytes,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(shape=list(data["shape"]), elem_bytes=int(data["elem_bytes"]))


class DataRef:
    """Handle to an intermediate tensor.

    Placeholders are opaque: only identity and payload metadata may be read.
    Any attempt to use one as a concrete value raises PlaceholderAccessError.
    """

    def __init__(
        self,
        ref_id,
        producer,
        output_index,
        payload_desc,
        streaming=False,
        state=RefState.PLACEHOLDER,
        location=None,
        producer_step=None,
        producer_label=None,
    ):
        self.ref_id = ref_id
        self.producer = producer
        self.output_index = output_index
        self.payload_desc = payload_desc
        self.streaming = streaming
        self.state = RefState(state)
        self.location = location
        self.producer_step = producer_step
        self.producer_label = producer_label
        if self.state is RefState.MATERIALIZED and location is None:
            raise ValueError(f"materialized ref {ref_id} needs a location")

    @property
    def total_bytes(self):
        return self.payload_desc.total_bytes

    @property
    def is_placeholder(self):
        return self.state is RefState.PLACEHOLDER

    def materialized(self, location):
        return DataRef(
            self.ref_id,
            self.producer,
            self.output_index,
            self.payload_desc,
            streaming=self.streaming,
            state=RefState.MATERIALIZED,
            location=location,
            producer_step=self.producer_step,
            producer_label=self.producer_label,
        )

    def _hazard(self, operation):
        if self.producer == CLIENT_INPUT:
            origin = "client input"
        else:
            origin = (
                f"invocation step {self.producer_step} "
                f"({self.producer_label}, {self.producer})"
            )
        error = PlaceholderAccessError(
            f"placeholder {self.ref_id} produced by {origin} was used as a "
            f"concrete value ({operation}) during record",
            step=self.producer_step,
            invocation_id=self.producer,
        )
        session = _ACTIVE.get()
        if session is not None and session.hazard is None:
            session.hazard = error
        return error

    def _guard(self, operation):
        if self.is_placeholder:
            raise self._hazard(operation)

    def __bool__(self):
        self._guard("truth test")
        return True

    def __len__(self):
        self._guard("len")
        return self.total_bytes

    def __iter__(self):
        self._guard("iteration")
        return iter(())

    def __getitem__(self, key):
        self._guard("indexing")
        raise TypeError("DataRef content is held by the sidecar")

    def __contains__(self, item):
        self._guard("containment")
        return False

    def __int__(self):
        self._guard("int()")
        return 0

    def __float__(self):
        self._guard("float()")
        return 0.0

    def __index__(self):
        self._guard("index()")
        return 0

    @property
    def content(self):
        self._guard("content access")
        raise TypeError("DataRef content is held by the sidecar")

    def __repr__(self):
        return (
            f"DataRef({self.ref_id}, producer={self.producer}[{self.output_index}], "
            f"{self.total_bytes}B, {self.state.value})"
        )

    def to_dict(self):
        body = {
            "ref_id": self.ref_id,
            "producer": self.producer,
            "output_index": self.output_index,
            "payload": self.payload_desc.to_dict(),
            "streaming": self.streaming,
            "state": self.state.value,
        }
        if self.location is not None:
            body["location"] = list(self.location)
        return body

    @classmethod
    def from_dict(cls, data):
        location = data.get("location")
        return cls(
            ref_id=data["ref_id"],
            producer=data["producer"],
            output_index=int(data["output_index"]),
            payload_desc=PayloadDesc.from_dict(data["payload"]),
            streaming=bool(data.get("streaming", False)),
            state=data.get("state", RefState.PLACEHOLDER.value),
            location=tuple(location) if location is not None else None,
        )


@dataclass
class RecordedInvocation:
    invocation_id: str
    task_digest: str
    inputs: list
    outputs: list
    streaming: bool = False
    label: str = ""
    step: int = 0

    def input_refs(self):
        return [
            (position, value)
            for position, value in enumerate(self.inputs)
            if isinstance(value, DataRef)
        ]

    def to_dict(self):
        inputs = []
        for value in self.inputs:
            if isinstance(value, DataRef):
                inputs.append({"ref": value.to_dict()})
            else:
                inputs.append({"literal": value})
        return {
            "invocation_id": self.invocation_id,
            "task_digest": self.task_digest,
            "label": self.label,
            "step": self.step,
            "streaming": self.streaming,
            "inputs": inputs,
            "outputs": [ref.to_dict() for ref in self.outputs],
        }

    @classmethod
    def from_dict(cls, data):
        inputs = []
        for raw in data["inputs"]:
            if "ref" in raw:
                inputs.append(DataRef.from_dict(raw["ref"]))
            else:
                inputs.append(raw["literal"])
        return cls(
            invocation_id=data["invocation_id"],
            task_digest=data["task_digest"],
            inputs=inputs,
            outputs=[DataRef.from_dict(raw) for raw in data["outputs"]],
            streaming=bool(data.get("streaming", False)),
            label=data.get("label", ""),
            step=int(data.get("step", 0)),
        )


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


class RecordSession:
    def __init__(self, request_id):
        self.request_id = request_id
        self.invocations = []
        self.hazard = None
        self._refs = 0

    def _new_ref(self, producer, index, shape, elem_bytes, streaming, step=None, label=None):
        ref = DataRef(
            f"{self.request_id}/ref-{self._refs:04d}",
            producer,
            index,
            PayloadDesc(list(shape), elem_bytes),
            streaming=streaming,
            producer_step=step,
            producer_label=label,
        )
        self._refs += 1
        return ref

    def client_ref(self, raw_bytes):
        return self._new_ref(CLIENT_INPUT, 0, [raw_bytes], 1, False)

    def call(self, handle, inputs, outputs, streaming):
        step = len(self.invocations)
        invocation_id = f"inv-{step:04d}"
        refs = [
            self._new_ref(invocation_id, index, shape, elem_bytes, streaming, step, handle.label)
            for index, (shape, elem_bytes) in enumerate(outputs)
        ]
        self.invocations.append(
            RecordedInvocation(
                invocation_id=invocation_id,
                task_digest=handle.digest,
                inputs=list(inputs),
                outputs=refs,
                streaming=streaming,
                label=handle.label,
                step=step,
            )
        )
        logger.debug("Recorded %s %s -> %d outputs", invocation_id, handle.label, len(refs))
        return refs


class ReplaySession:
    def __init__(self, graph, results):
        self.graph = graph
        self.results = results
        self.order = list(graph.nodes)
        self.step = 0
        self.hazard = None

    def client_ref(self, raw_bytes):
        return None

    def call(self, handle, inputs, outputs, streaming):
        step = self.step
        if step >= len(self.order):
            raise DeterminismViolation(
                f"replay diverged at step {step}: extra invocation of "
                f"{handle.label} ({handle.digest[:12]}) that was never recorded",
                step=step,
            )
        expected = self.graph.nodes[self.order[step]]
        if expected.task_digest != handle.digest or len(expected.outputs) != len(outputs):
            raise DeterminismViolation(
                f"replay diverged at step {step}: recorded {expected.label} "
                f"({expected.task_digest[:12]}), replayed {handle.label} "
                f"({handle.digest[:12]})",
                step=step,
            )
        self.step += 1
        try:
            return list(self.results[expected.invocation_id])
        except KeyError:
            raise DispatchError(
                f"no result for {expected.invocation_id} ({expected.label})"
            ) from None


def active_session():
    session = _ACTIVE.get()
    if session is None:
        raise RecordingError("unit task invoked outside of record or replay")
    return session


# ---------------------------------------------------------------------------
# Unit task handles
# ---------------------------------------------------------------------------


class UnitTaskHandle:
    """What composite logic holds for each unit-task child."""

    def __init__(self, spec, shape_rule=None):
        self.spec = spec
        self.digest = canonical_hash(spec)
        self.label = task_label(spec)
        self.rule = dict(DEFAULT_SHAPE_RULE)
        self.rule.update(shape_rule or {})

    def _call(self, inputs, outputs, streaming):
        refs = active_session().call(self, inputs, outputs, streaming)
        return refs[0] if len(refs) == 1 else tuple(refs)


class EncoderHandle(UnitTaskHandle):
    def invoke(self, item):
        session = active_session()
        source = session.client_ref(item.raw_bytes)
        inputs = [{"items": [item.to_dict()]}]
        if source is not None:
            inputs.append(source)
        shape = embedding_shape(item, self.rule)
        return self._call(inputs, [(shape, rule_value(self.rule, "elem_bytes"))], False)


class LLMHandle(UnitTaskHandle):
    def invoke(
        self,
        request,
        embeddings=(),
        hidden_states=None,
        prompt_tokens=None,
        output_tokens=None,
        return_hidden=False,
    ):
        prompt_tokens = request.prompt_tokens if prompt_tokens is None else prompt_tokens
        output_tokens = request.output_tokens if output_tokens is None else output_tokens
        inline_items = 0 if self.spec.recv_embeds else len(request.multimodal_items())
        literal = {
            "request_id": request.request_id,
            "prompt_tokens": int(prompt_tokens),
            "output_tokens": int(output_tokens),
            "inline_items": inline_items,
        }
        inputs = [literal] + list(embeddings)
        if hidden_states is not None:
            inputs.append(hidden_states)
        outputs = [([int(output_tokens)], rule_value(self.rule, "token_bytes"))]
        if return_hidden:
            if not self.spec.emit_hidden_states:
                raise TaskValidationError(f"{self.label} does not emit hidden states")
            outputs.append(
                ([int(output_tokens), rule_value(self.rule, "hidden")], rule_value(self.rule, "elem_bytes"))
            )
        return self._call(inputs, outputs, True)


class MonolithHandle(UnitTaskHandle):
    """A whole Omni model in one executor: text stream plus optional audio."""

    def invoke(self, request):
        session = active_session()
        literal = request.summary()
        inputs = [literal]
        for item in request.multimodal_items():
            source = session.client_ref(item.raw_bytes)
            if source is not None:
                inputs.append(source)
        outputs = [([int(request.output_tokens)], rule_value(self.rule, "token_bytes"))]
        if request.audio_output and self.spec.extra_config.get("audio_output", False):
            samples = int(request.audio_tokens) * rule_value(self.rule, "samples_per_token")
            outputs.append(([samples], rule_value(self.rule, "elem_bytes")))
        return self._call(inputs, outputs, True)


class GeneratorHandle(UnitTaskHandle):
    def invoke(self, tokens):
        if self.spec.modality is Modality.IMAGE:
            return self._image(tokens)
        audio_tokens = tokens.payload_desc.shape[0] if isinstance(tokens, DataRef) else 0
        samples = audio_tokens * rule_value(self.rule, "samples_per_token")
        inputs = [{"audio_tokens": audio_tokens}, tokens]
        return self._call(inputs, [([samples], rule_value(self.rule, "elem_bytes"))], True)

    def _image(self, latents):
        """One RGB image decoded from a square grid of latent tokens."""
        count = latents.payload_desc.shape[0] if isinstance(latents, DataRef) else 0
        side = math.ceil(math.sqrt(count)) * rule_value(self.rule, "pixels_per_latent")
        inputs = [{"latent_tokens": count}, latents]
        return self._call(inputs, [([side, side, 3], 1)], False)


def bind_handle(spec, catalog=None):
    rule = catalog.shape_rule(spec) if catalog is not None else None
    if spec.task_class is TaskClass.ENCODER:
        return EncoderHandle(spec, rule)
    if spec.task_class is TaskClass.GENERATOR:
        return GeneratorHandle(spec, rule)
    if spec.role == "monolith":
        return MonolithHandle(spec, rule)
    return LLMHandle(spec, rule)


class CompositeTask:
    """Base class for composite logic; subclasses implement ``invoke``."""

    def __init__(self, spec, catalog=None):
        self.spec = spec
        self.name = spec.name
        self.config = spec.config
        self.tasks = {}
        for name, child in spec.children.items():
            if isinstance(child, CompositeTaskSpec):
                self.tasks[name] = composite_logic(child, catalog)
            else:
                self.tasks[name] = bind_handle(child, catalog)

    def invoke(self, request):
        raise NotImplementedError


class _FanOut:
    """Several composites invoked by one request, each on its own copy."""

    def __init__(self, specs, catalog=None):
        self.name = "+".join(specs)
        self.logics = {name: composite_logic(spec, catalog) for name, spec in specs.items()}

    def invoke(self, request):
        return {name: logic.invoke(request.copy()) for name, logic in self.logics.items()}


def composite_logic(spec, catalog=None):
    if isinstance(spec, dict):
        return _FanOut(spec, catalog)
    cls = COMPOSITE_LOGIC.get(spec.name)
    if cls is None:
        raise TaskValidationError(f"no logic registered for composite {spec.name!r}")
    return cls(spec, catalog)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _collect_refs(value, found):
    if isinstance(value, DataRef):
        found.append(value)
    elif isinstance(value, dict):
        for item in value.values():
            _collect_refs(item, found)
    elif isinstance(value, (list, tuple)):
        for item in value:
            _collect_refs(item, found)
    return found


def match_placeholders(session):
    """Link every input DataRef to the earlier invocation output it names."""
    if not session:
        raise GraphValidationError("cannot match placeholders of an empty session")
    produced = {}
    edges = []
    for invocation in session:
        for position, ref in invocation.input_refs():
            if ref.producer == CLIENT_INPUT:
                continue
            origin = produced.get(ref.ref_id)
            if origin is None:
                raise DanglingReferenceError(
                    f"input {position} of {invocation.invocation_id} references "
                    f"{ref.ref_id}, which no earlier invocation produced"
                )
            edges.append(Edge(origin[0], origin[1], invocation.invocation_id, position))
        for ref in invocation.outputs:
            produced[ref.ref_id] = (invocation.invocation_id, ref.output_index)
    return edges


def record(composite, request, catalog=None):
    """Run composite logic against placeholders and return its graph.

    ``composite`` is one CompositeTaskSpec or a name -> spec mapping whose
    composites all serve the same request.
    """
    # utils_graph imports this module
    from fissionserve.utils_graph import InvocationGraph

    logic = composite_logic(composite, catalog)
    session = RecordSession(request.request_id)
    token = _ACTIVE.set(session)
    try:
        output = logic.invoke(request.copy())
    except FissionError:
        raise
    except Exception as err:
        logger.error("Composite %s failed during record: %r", logic.name, err)
        raise RecordingError(
            f"composite {logic.name} raised during record: {err!r}"
        ) from err
    finally:
        _ACTIVE.reset(token)
    if session.hazard is not None:
        raise session.hazard

    sinks = _collect_refs(output, [])
    edges = match_placeholders(session.invocations) if session.invocations else []
    consumed = set()
    for invocation in session.invocations:
        for _, ref in invocation.input_refs():
            consumed.add(ref.ref_id)
    sink_ids = {ref.ref_id for ref in sinks}
    unused = [
        ref.ref_id
        for invocation in session.invocations
        for ref in invocation.outputs
        if ref.ref_id not in consumed and ref.ref_id not in sink_ids
    ]
    if unused:
        raise RecordingError(
            f"placeholders never consumed nor returned: {', '.join(unused)}"
        )
    graph = InvocationGraph(
        request_id=request.request_id,
        nodes={inv.invocation_id: inv for inv in session.invocations},
        edges=edges,
        sink_refs=sinks,
    )
    logger.debug(
        "Recorded %s for %s: %d nodes, %d edges",
        logic.name,
        request.request_id,
        len(graph.nodes),
        len(edges),
    )
    return graph


def replay(composite, request, results, graph, catalog=None):
    """Re-run composite logic, handing each call its real dispatched result."""
    logic = composite_logic(composite, catalog)
    session = ReplaySession(graph, results)
    token = _ACTIVE.set(session)
    try:
        output = logic.invoke(request.copy())
    finally:
        _ACTIVE.reset(token)
    if session.step != len(session.order):
        missing = graph.nodes[session.order[session.step]]
        raise DeterminismViolation(
            f"replay diverged at step {session.step}: recorded {missing.label} "
            f"was never invoked",
            step=session.step,
        )
    return output
