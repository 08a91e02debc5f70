import queue
import logging

from fissionserve.utils_errors import UnsupportedModalityError
from fissionserve.utils_record import CompositeTask, register_logic
from fissionserve.utils_tasks import CompositeTaskSpec, register_serve_routine

logger = logging.getLogger("FissionServe")


def _encode_items(name, tasks, req):
    for item in req.multimodal_items():
        encoder = tasks.get(f"encoder_{item.modality.value.lower()}")
        if encoder is None:
            raise UnsupportedModalityError(
                f"{name} has no {item.modality.value} encoder", modality=item.modality.value
            )
        req.multimodal_embeddings.append(encoder.invoke(item))


@register_logic("MLLMTask")
class MLLMTask(CompositeTask):
    """Encoders for each multimodal item, then one LLM call."""

    def invoke(self, req):
        if self.config.get("encoder_fission", True):
            _encode_items("MLLMTask", self.tasks, req)
        return self.tasks["llm"].invoke(req, req.multimodal_embeddings)


@register_logic("OmniTask")
class OmniTask(CompositeTask):
    """Thinker produces text; with audio output the talker and generator follow."""

    def invoke(self, req):
        if "monolith" in self.tasks:
            outputs = self.tasks["monolith"].invoke(req)
            if isinstance(outputs, tuple):
                return {"text": outputs[0], "audio": outputs[1]}
            return {"text": outputs}

        _encode_items("OmniTask", self.tasks, req)

        thinker = self.tasks["thinker"]
        if not (req.audio_output and "talker" in self.tasks):
            return {"text": thinker.invoke(req, req.multimodal_embeddings)}

        text, hidden = thinker.invoke(req, req.multimodal_embeddings, return_hidden=True)
        tokens = self.tasks["talker"].invoke(
            req,
            hidden_states=hidden,
            prompt_tokens=req.output_tokens,
            output_tokens=req.audio_tokens,
        )
        audio = self.tasks["generator"].invoke(tokens)
        return {"text": text, "audio": audio}


@register_logic("ImageGenTask")
class ImageGenTask(CompositeTask):
    """LLM decodes image tokens; their hidden states go to the image generator."""

    def invoke(self, req):
        if self.config.get("encoder_fission", True):
            _encode_items("ImageGenTask", self.tasks, req)
        llm = self.tasks["llm"]
        if not req.image_output:
            return {"text": llm.invoke(req, req.multimodal_embeddings)}
        text, latents = llm.invoke(req, req.multimodal_embeddings, return_hidden=True)
        return {"text": text, "image": self.tasks["generator"].invoke(latents)}


# ---------------------------------------------------------------------------
# Stream helpers
# ---------------------------------------------------------------------------

_END = object()


def merge_streams(streams, timeout=None):
    """Interleave several result streams in arrival order.

    Yields ``(name, chunk)`` pairs until every stream has ended. A stream that
    fails re-raises its error here.
    """
    inbox = queue.Queue()
    pumps = []
    for name, stream in streams.items():
        stream.add_listener(
            lambda chunk, name=name: inbox.put((name, chunk)),
            lambda error, name=name: inbox.put((name, error if error else _END)),
        )
        if stream.pump is not None and stream.pump not in pumps:
            pumps.append(stream.pump)
    live = len(streams)
    while live:
        try:
            name, item = inbox.get_nowait()
        except queue.Empty:
            if any(pump() for pump in pumps):
                continue
            name, item = inbox.get(timeout=timeout)
        if item is _END:
            live -= 1
        elif isinstance(item, BaseException):
            raise item
        else:
            yield name, item


def _render(kind, chunk, **extra):
    body = {"type": kind}
    body.update(extra)
    body.update(chunk)
    return body


# ---------------------------------------------------------------------------
# Serve routines
# ---------------------------------------------------------------------------


class ServeRoutine:
    """Fixed app entry point selected by name in a manifest."""

    name = ""

    def check(self, tasks):
        return []

    def calls(self, tasks, request):
        raise NotImplementedError

    def respond(self, request, outputs):
        raise NotImplementedError

    def sinks(self, outputs):
        """All result streams the response depends on, for completion tracking."""
        found = []
        for value in outputs.values():
            if isinstance(value, dict):
                found.extend(v for v in value.values() if v is not None)
            elif value is not None:
                found.append(value)
        return found


def _require(tasks, name, composite):
    spec = tasks.get(name)
    if not isinstance(spec, CompositeTaskSpec) or spec.name != composite:
        return [f"serve_entry requires task {name!r} of composite {composite}"]
    return []


@register_serve_routine
class MLLMChat(ServeRoutine):
    name = "mllm_chat"

    def check(self, tasks):
        return _require(tasks, "mllm", "MLLMTask")

    def calls(self, tasks, request):
        return ["mllm"]

    def respond(self, request, outputs):
        for chunk in outputs["mllm"]:
            yield _render("text", chunk)


@register_serve_routine
class OmniChat(ServeRoutine):
    name = "omni_chat"

    def check(self, tasks):
        return _require(tasks, "omni", "OmniTask")

    def calls(self, tasks, request):
        return ["omni"]

    def respond(self, request, outputs):
        streams = {k: v for k, v in outputs["omni"].items() if v is not None}
        for kind, chunk in merge_streams(streams):
            yield _render(kind, chunk)


@register_serve_routine
class ImageGeneration(ServeRoutine):
    name = "image_gen"

    def check(self, tasks):
        return _require(tasks, "imagegen", "ImageGenTask")

    def calls(self, tasks, request):
        return ["imagegen"]

    def respond(self, request, outputs):
        streams = {k: v for k, v in outputs["imagegen"].items() if v is not None}
        for kind, chunk in merge_streams(streams):
            yield _render(kind, chunk)


@register_serve_routine
class GemmaArena(ServeRoutine):
    """Fan the same request out to every MLLM and merge their streams."""

    name = "gemma_arena"

    def check(self, tasks):
        errors = []
        for name, spec in tasks.items():
            if not isinstance(spec, CompositeTaskSpec) or spec.name != "MLLMTask":
                errors.append(f"gemma_arena task {name!r} must be an MLLMTask")
        return errors

    def calls(self, tasks, request):
        return list(tasks)

    def respond(self, request, outputs):
        for model, chunk in merge_streams(outputs):
            yield _render("text", chunk, model=model)

