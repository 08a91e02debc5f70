import math
import logging

from collections import deque

from fissionserve.utils_errors import ActivationOOM, ExecutorFailure, FissionError
from fissionserve.utils_profiles import ProfileKind
from fissionserve.utils_record import CLIENT_INPUT, DataRef
from fissionserve.utils_tasks import Modality, TaskClass

logger = logging.getLogger("FissionServe")

RECEIVED = "Received"
RUNNING = "Running"
COMPUTED = "Computed"


class Job:
    """One dispatched invocation as seen by an executor."""

    def __init__(self, message, sink):
        self.message = message
        self.sink = sink
        self.request_id = message["request_id"]
        self.invocation_id = message["invocation_id"]
        self.inputs = [
            DataRef.from_dict(raw["ref"]) if "ref" in raw else raw["literal"]
            for raw in message["inputs"]
        ]
        self.output_refs = [DataRef.from_dict(raw) for raw in message["output_refs"]]
        self.output_dests = [list(dests) for dests in message["output_dests"]]
        self.waiting = {
            value.ref_id
            for value in self.inputs
            if isinstance(value, DataRef) and value.producer != CLIENT_INPUT
        }
        self.out_seq = [0] * len(self.output_refs)
        self.transfer_ms = 0.0
        self.cancelled = False
        self.failed = False

    @property
    def key(self):
        return (self.request_id, self.invocation_id)

    @property
    def literal(self):
        return self.inputs[0] if self.inputs and isinstance(self.inputs[0], dict) else {}

    def bytes_per_token(self, index, tokens):
        if tokens <= 0:
            return 0
        return self.output_refs[index].total_bytes // tokens


def _text(start, count):
    return " ".join(f"w{i}" for i in range(start, start + count))


class Executor:
    """Common dispatch, input tracking and output plumbing."""

    def __init__(self, replica_id, descriptor, profile, gpu_ids, clock, sidecar, dataplane, free_bytes_per_gpu=None):
        self.replica_id = replica_id
        self.descriptor = descriptor
        self.profile = profile
        self.gpu_ids = list(gpu_ids)
        self.tp = len(self.gpu_ids)
        self.clock = clock
        self.sidecar = sidecar
        self.dataplane = dataplane
        self.free_bytes_per_gpu = free_bytes_per_gpu
        self.jobs = {}
        self.busy = []
        self.completed = 0
        self.failed = 0
        profile.speedup(self.tp)

    def __repr__(self):
        return f"{type(self).__name__}({self.replica_id}, gpus={self.gpu_ids})"

    @property
    def label(self):
        return self.descriptor.unit_task.role or self.descriptor.unit_task.task_class.value

    # -- dispatch -----------------------------------------------------------

    def admission_error(self, job):
        return None

    def submit(self, message, sink):
        job = Job(message, sink)
        self.jobs[job.key] = job
        sink.status(job.invocation_id, RECEIVED, self.clock.now)
        error = self.admission_error(job)
        if error is not None:
            self.reject(job, error)
            return job
        for ref_id in sorted(job.waiting):
            self.sidecar.expect(
                ref_id,
                lambda chunk, job=job, ref_id=ref_id: self._on_input(job, ref_id, chunk),
                lambda error, job=job: self._on_input_error(job, error),
            )
        if not job.waiting:
            self.on_ready(job)
        return job

    def _on_input(self, job, ref_id, chunk):
        if job.cancelled or job.failed:
            return
        self.on_input_chunk(job, ref_id, chunk)
        if chunk.final and ref_id in job.waiting:
            job.waiting.discard(ref_id)
            if not job.waiting:
                self.on_ready(job)

    def _on_input_error(self, job, error):
        if job.cancelled or job.failed:
            return
        cause = error.message if isinstance(error, FissionError) else str(error)
        self.fail(job, ExecutorFailure(f"input of {job.invocation_id} failed: {cause}", invocation_id=job.invocation_id))

    def on_input_chunk(self, job, ref_id, chunk):
        pass

    def on_ready(self, job):
        raise NotImplementedError

    def cancel(self, request_id, invocation_id):
        job = self.jobs.pop((request_id, invocation_id), None)
        if job is None:
            return False
        job.cancelled = True
        for ref_id in job.waiting:
            self.sidecar.forget(ref_id)
        self.on_cancel(job)
        logger.debug("%s cancelled %s/%s", self, request_id, invocation_id)
        return True

    def on_cancel(self, job):
        pass

    # -- outputs ------------------------------------------------------------

    def emit(self, job, index, nbytes, final, body, tokens=None):
        if job.cancelled or job.failed:
            return
        seq = job.out_seq[index]
        job.out_seq[index] += 1
        ref = job.output_refs[index]
        meta = {"tokens": tokens} if tokens is not None else None
        for dest in job.output_dests[index]:
            job.transfer_ms += self.dataplane.forward(
                self.gpu_ids[0],
                dest,
                job.request_id,
                ref.ref_id,
                seq,
                int(nbytes),
                final,
                meta=meta,
                on_error=lambda err, job=job: self.fail(job, err),
            )
        chunk = {"seq": seq}
        chunk.update(body)
        job.sink.chunk(job.invocation_id, index, chunk)
        if final:
            job.sink.output_done(job.invocation_id, index)

    def finish(self, job):
        if job.cancelled or job.failed:
            return
        self.jobs.pop(job.key, None)
        self.completed += 1
        job.sink.status(job.invocation_id, COMPUTED, self.clock.now)
        job.sink.complete(job.invocation_id, {"transfer_ms": job.transfer_ms})

    def fail(self, job, error):
        if job.cancelled or job.failed:
            return
        job.failed = True
        self.failed += 1
        self.jobs.pop(job.key, None)
        if not isinstance(error, ExecutorFailure):
            message = error.message if isinstance(error, FissionError) else str(error)
            error = ExecutorFailure(message, invocation_id=job.invocation_id)
        elif error.invocation_id is None:
            error.invocation_id = job.invocation_id
        logger.error("%s failed %s (%s): %s", self, job.invocation_id, job.request_id, error.message)
        self.on_fail(job)
        job.sink.fail(job.invocation_id, error)
        for index, ref in enumerate(job.output_refs):
            for dest in job.output_dests[index]:
                self.dataplane.fail(self.gpu_ids[0], dest, ref.ref_id, error.message)

    def on_fail(self, job):
        pass

    def reject(self, job, error):
        self.clock.call_later(0.0, self.fail, job, error)

    def running(self, job):
        job.sink.status(job.invocation_id, RUNNING, self.clock.now)

    def mark_busy(self, start, end):
        if end <= start:
            return
        if self.busy and abs(self.busy[-1][1] - start) < 1e-9:
            self.busy[-1] = (self.busy[-1][0], end)
        else:
            self.busy.append((start, end))

    def busy_ms(self, start=None, end=None):
        total = 0.0
        for lo, hi in self.busy:
            if start is not None:
                lo = max(lo, start)
            if end is not None:
                hi = min(hi, end)
            total += max(0.0, hi - lo)
        return total

    def activation_oom(self, job, needed):
        if self.free_bytes_per_gpu is None or needed <= self.free_bytes_per_gpu:
            return None
        return ActivationOOM(
            f"{self.label} on gpus {self.gpu_ids} needs {needed:.0f} activation bytes per GPU, "
            f"{self.free_bytes_per_gpu:.0f} free",
            invocation_id=job.invocation_id,
        )

    def stats(self):
        return {
            "replica_id": self.replica_id,
            "kind": type(self).__name__,
            "completed": self.completed,
            "failed": self.failed,
            "in_flight": len(self.jobs),
            "busy_ms": self.busy_ms(),
        }

    def shutdown(self):
        for key in list(self.jobs):
            self.cancel(*key)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


class EncoderExecutor(Executor):
    """FIFO encoder: one call at a time, (base + per_item * items) each."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.queue = deque()
        self.current = None

    def admission_error(self, job):
        if not job.literal.get("items"):
            return ExecutorFailure("encoder dispatched with no items", invocation_id=job.invocation_id)
        return self.activation_oom(job, self.profile.activation_bytes_per_request / self.tp)

    def on_ready(self, job):
        self.queue.append(job)
        self._next()

    def _next(self):
        while self.current is None and self.queue:
            job = self.queue.popleft()
            if job.cancelled or job.failed:
                continue
            self.current = job
            self.running(job)
            duration = self.profile.encode_ms(len(job.literal["items"]), self.tp)
            self.clock.call_later(duration, self._done, job, self.clock.now)

    def _done(self, job, start):
        self.current = None
        self.mark_busy(start, self.clock.now)
        nbytes = job.output_refs[0].total_bytes
        self.emit(job, 0, nbytes, True, {"bytes": nbytes})
        self.finish(job)
        self._next()


# ---------------------------------------------------------------------------
# Continuous-batching LLM engine (thinker, plain LLM, talker)
# ---------------------------------------------------------------------------


class LLMEngine(Executor):
    """Continuous batching: requests join and leave at step boundaries.

    A step over B running requests takes ``a + b*B`` plus the prefill of the
    requests joining at that step, divided by the TP speedup. Every running
    request emits one token per step.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cap = self.profile.effective_batch(self.free_bytes_per_gpu, self.tp)
        self.waiting_queue = deque()
        self.running_batch = []
        self.stepping = False
        self.steps = 0
        self.batch_tokens = 0
        self.role = self.descriptor.unit_task.role

    def admission_error(self, job):
        if self.cap <= 0:
            return self.activation_oom(job, self.profile.activation_bytes_per_request / self.tp)
        return None

    def on_ready(self, job):
        literal = job.literal
        job.target = int(literal.get("output_tokens", 0))
        job.prompt = int(literal.get("prompt_tokens", 0))
        job.inline_items = int(literal.get("inline_items", 0))
        job.generated = 0
        job.flushed = 0
        self.waiting_queue.append(job)
        if not self.stepping:
            self._step()

    def _step(self):
        joiners = []
        while self.waiting_queue and len(self.running_batch) < self.cap:
            job = self.waiting_queue.popleft()
            if job.cancelled or job.failed:
                continue
            self.running_batch.append(job)
            joiners.append(job)
            self.running(job)
        if not self.running_batch:
            self.stepping = False
            return
        prefill = sum(
            self.profile.prefill_ms_per_token * job.prompt
            + self.profile.inline_encode_ms(job.inline_items)
            for job in joiners
        )
        duration = self.profile.step_ms(len(self.running_batch), self.tp, prefill_ms=prefill)
        self.stepping = True
        self.clock.call_later(duration, self._step_done, self.clock.now)

    def _step_done(self, start):
        self.mark_busy(start, self.clock.now)
        self.steps += 1
        self.batch_tokens += len(self.running_batch)
        finished = []
        for job in list(self.running_batch):
            if job.cancelled or job.failed:
                self.running_batch.remove(job)
                continue
            if job.generated < job.target:
                job.generated += 1
            done = job.generated >= job.target
            if done or job.generated - job.flushed >= self.profile.stream_chunk_tokens:
                self._flush(job, final=done)
            if done:
                finished.append(job)
        for job in finished:
            self.running_batch.remove(job)
            self.finish(job)
        self._step()

    def _flush(self, job, final):
        count = job.generated - job.flushed
        start = job.flushed
        job.flushed = job.generated
        per_token = job.bytes_per_token(0, job.target)
        if self.role == "talker":
            body = {"tokens": count}
        else:
            body = {"tokens": count, "text": _text(start, count)}
        self.emit(job, 0, count * per_token, final, body, tokens=count)
        if len(job.output_refs) > 1:
            hidden = job.bytes_per_token(1, job.target) * count
            self.emit(job, 1, hidden, final, {"tokens": count, "bytes": hidden}, tokens=count)

    @property
    def mean_batch(self):
        return self.batch_tokens / self.steps if self.steps else 0.0

    def stats(self):
        body = super().stats()
        body.update(steps=self.steps, mean_batch=self.mean_batch, cap=self.cap)
        return body


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


class GeneratorExecutor(Executor):
    """Consumes token chunks as they stream in; FIFO across requests."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.queue = deque()
        self.current = None

    def admission_error(self, job):
        return self.activation_oom(job, self.profile.activation_bytes_per_request / self.tp)

    def on_input_chunk(self, job, ref_id, chunk):
        tokens = int(chunk.meta.get("tokens", 0))
        self.queue.append((job, tokens, chunk.final))
        self._next()

    def on_ready(self, job):
        pass

    def _next(self):
        while self.current is None and self.queue:
            job, tokens, final = self.queue.popleft()
            if job.cancelled or job.failed:
                continue
            if job.out_seq[0] == 0 and not getattr(job, "started", False):
                job.started = True
                self.running(job)
            if tokens <= 0:
                if final:
                    self.emit(job, 0, 0, True, {"tokens": 0, "audio_bytes": 0})
                    self.finish(job)
                continue
            self.current = job
            calls = math.ceil(tokens / self.profile.tokens_per_chunk)
            duration = calls * self.profile.chunk_ms(self.tp)
            self.clock.call_later(duration, self._done, job, tokens, final, self.clock.now)

    def _done(self, job, tokens, final, start):
        self.current = None
        self.mark_busy(start, self.clock.now)
        audio_tokens = int(job.literal.get("audio_tokens", 0))
        nbytes = job.bytes_per_token(0, audio_tokens) * tokens
        self.emit(job, 0, nbytes, final, {"tokens": tokens, "audio_bytes": nbytes}, tokens=tokens)
        if final:
            self.finish(job)
        self._next()


class ImageGeneratorExecutor(GeneratorExecutor):
    """Waits for the whole latent sequence, then decodes one image per call."""

    def on_input_chunk(self, job, ref_id, chunk):
        job.latent_tokens = getattr(job, "latent_tokens", 0) + int(chunk.meta.get("tokens", 0))

    def on_ready(self, job):
        self.queue.append((job, getattr(job, "latent_tokens", 0), True))
        self._next()

    def _done(self, job, tokens, final, start):
        self.current = None
        self.mark_busy(start, self.clock.now)
        nbytes = job.output_refs[0].total_bytes
        self.emit(job, 0, nbytes, True, {"tokens": tokens, "image_bytes": nbytes})
        self.finish(job)
        self._next()


# ---------------------------------------------------------------------------
# Monolith
# ---------------------------------------------------------------------------


class MonolithExecutor(Executor):
    """Every component of an Omni model behind one exclusive compute lock.

    Work items run strictly one at a time in FIFO order: encoding a request,
    one continuous-batching thinker step, a whole batch-1 talker generation,
    or vocoding a whole request. Admission is capped at the thinker's
    effective batch size.
    """

    def __init__(self, replica_id, descriptor, profiles, gpu_ids, clock, sidecar, dataplane, free_bytes_per_gpu=None):
        self.components = profiles
        super().__init__(
            replica_id, descriptor, profiles["thinker"], gpu_ids, clock, sidecar, dataplane, free_bytes_per_gpu
        )
        self.thinker = profiles["thinker"]
        self.encoder = profiles.get("encoder")
        self.talker = profiles.get("talker")
        self.generator = profiles.get("generator")
        activation = sum(p.activation_bytes_per_request for p in profiles.values())
        self.cap = self.thinker.max_batch
        if self.free_bytes_per_gpu is not None and activation > 0:
            self.cap = max(0, min(self.cap, int(self.free_bytes_per_gpu // (activation / self.tp))))
        self.backlog = deque()
        self.admitted = set()
        self.thinking = []
        self.work = deque()
        self.step_queued = False
        self.current = None
        self.component_busy = {role: 0.0 for role in profiles}

    def admission_error(self, job):
        if self.cap <= 0:
            activation = sum(p.activation_bytes_per_request for p in self.components.values())
            return self.activation_oom(job, activation / self.tp)
        return None

    def on_ready(self, job):
        literal = job.literal
        job.items = len(literal.get("items", []))
        job.target = int(literal.get("output_tokens", 0))
        job.prompt = int(literal.get("prompt_tokens", 0))
        job.audio = len(job.output_refs) > 1
        job.audio_tokens = int(literal.get("audio_tokens", 0)) if job.audio else 0
        job.generated = 0
        job.flushed = 0
        job.joined = False
        self.backlog.append(job)
        self._admit()

    def _admit(self):
        while self.backlog and len(self.admitted) < self.cap:
            job = self.backlog.popleft()
            if job.cancelled or job.failed:
                continue
            self.admitted.add(job.key)
            self.running(job)
            if job.items and self.encoder is not None:
                self.work.append(("encode", job))
            else:
                self._join_thinker(job)
        self._next()

    def _join_thinker(self, job):
        self.thinking.append(job)
        if not self.step_queued:
            self.work.append(("think", None))
            self.step_queued = True

    def _next(self):
        while self.current is None and self.work:
            kind, job = self.work.popleft()
            if job is not None and (job.cancelled or job.failed):
                continue
            start = self.clock.now
            if kind == "encode":
                duration = self.encoder.encode_ms(job.items, self.tp)
                self._hold(kind, duration, self._encoded, job, start)
            elif kind == "think":
                self.step_queued = False
                self.thinking = [j for j in self.thinking if not (j.cancelled or j.failed)]
                if not self.thinking:
                    continue
                prefill = 0.0
                for j in self.thinking:
                    if not j.joined:
                        j.joined = True
                        prefill += self.thinker.prefill_ms_per_token * j.prompt
                        if self.encoder is None:
                            prefill += self.thinker.inline_encode_ms(j.items)
                duration = self.thinker.step_ms(len(self.thinking), self.tp, prefill_ms=prefill)
                self._hold("thinker", duration, self._thought, None, start)
            elif kind == "talk":
                talker = self.talker
                raw = talker.prefill_ms_per_token * job.target
                raw += job.audio_tokens * (talker.decode_a_ms + talker.decode_b_ms)
                self._hold("talker", raw / talker.speedup(self.tp), self._talked, job, start)
            elif kind == "vocode":
                self._vocode(job, start)

    def _hold(self, role, duration, then, job, start):
        self.current = role
        self.clock.call_later(duration, self._release, role, then, job, start)

    def _release(self, role, then, job, start):
        self.current = None
        self.mark_busy(start, self.clock.now)
        key = "encoder" if role == "encode" else role
        if key in self.component_busy:
            self.component_busy[key] += self.clock.now - start
        then(job)
        self._next()

    def _encoded(self, job):
        if not (job.cancelled or job.failed):
            self._join_thinker(job)

    def _thought(self, _):
        finished = []
        for job in self.thinking:
            if job.generated < job.target:
                job.generated += 1
            done = job.generated >= job.target
            if done or job.generated - job.flushed >= self.thinker.stream_chunk_tokens:
                count = job.generated - job.flushed
                body = {"tokens": count, "text": _text(job.flushed, count)}
                job.flushed = job.generated
                self.emit(job, 0, count * job.bytes_per_token(0, job.target), done, body, tokens=count)
            if done:
                finished.append(job)
        for job in finished:
            self.thinking.remove(job)
            if job.audio and self.talker is not None:
                self.work.append(("talk", job))
            else:
                self._request_done(job)
        if self.thinking and not self.step_queued:
            self.work.append(("think", None))
            self.step_queued = True

    def _talked(self, job):
        if job.cancelled or job.failed:
            return
        if self.generator is None:
            self.emit(job, 1, 0, True, {"tokens": 0, "audio_bytes": 0})
            self._request_done(job)
        else:
            self.work.appendleft(("vocode", job))

    def _vocode(self, job, start):
        per_chunk = self.generator.tokens_per_chunk
        chunks = math.ceil(job.audio_tokens / per_chunk) if job.audio_tokens else 0
        if chunks == 0:
            self.emit(job, 1, 0, True, {"tokens": 0, "audio_bytes": 0})
            self._request_done(job)
            return
        self.current = "generator"
        chunk_ms = self.generator.chunk_ms(self.tp)
        per_token = job.bytes_per_token(1, job.audio_tokens)
        for k in range(chunks):
            tokens = min(per_chunk, job.audio_tokens - k * per_chunk)
            final = k == chunks - 1
            body = {"tokens": tokens, "audio_bytes": tokens * per_token}
            self.clock.call_later((k + 1) * chunk_ms, self._vocoded, job, tokens, per_token, body, final, start)

    def _vocoded(self, job, tokens, per_token, body, final, start):
        self.emit(job, 1, tokens * per_token, final, body, tokens=tokens)
        if final:
            self.current = None
            self.mark_busy(start, self.clock.now)
            self.component_busy["generator"] += self.clock.now - start
            self._request_done(job)
            self._next()

    def _request_done(self, job):
        self.admitted.discard(job.key)
        self.finish(job)
        self._admit()

    def on_cancel(self, job):
        self._drop(job)

    def on_fail(self, job):
        self._drop(job)

    def _drop(self, job):
        if job.key in self.admitted:
            self.admitted.discard(job.key)
            self.clock.call_later(0.0, self._admit)

    def stats(self):
        body = super().stats()
        body.update(cap=self.cap, component_busy_ms=dict(self.component_busy))
        return body


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


_MONOLITH_ROLES = {
    ProfileKind.ENCODER: "encoder",
    ProfileKind.LLM: "thinker",
    ProfileKind.TALKER: "talker",
    ProfileKind.GENERATOR: "generator",
}


def monolith_components(descriptor, profiles):
    """Map a monolith descriptor's component profiles to their roles."""
    components = {}
    names = descriptor.activation_profiles or (descriptor.profile_ref,)
    for name in names:
        profile = profiles.get(name)
        if profile is None:
            raise ExecutorFailure(f"monolith component profile {name!r} is not loaded")
        components[_MONOLITH_ROLES[profile.kind]] = profile
    if "thinker" not in components:
        raise ExecutorFailure(f"monolith {descriptor.profile_ref} has no LLM component")
    return components


def build_executor(replica_id, descriptor, profiles, gpu_ids, clock, sidecar, dataplane, free_bytes_per_gpu=None):
    spec = descriptor.unit_task
    args = (replica_id, descriptor)
    tail = (gpu_ids, clock, sidecar, dataplane, free_bytes_per_gpu)
    if spec.role == "monolith":
        return MonolithExecutor(*args, monolith_components(descriptor, profiles), *tail)
    profile = profiles.get(descriptor.profile_ref)
    if profile is None:
        raise ExecutorFailure(f"profile {descriptor.profile_ref!r} is not loaded")
    if spec.task_class is TaskClass.ENCODER:
        return EncoderExecutor(*args, profile, *tail)
    if spec.task_class is TaskClass.GENERATOR:
        if spec.modality is Modality.IMAGE:
            return ImageGeneratorExecutor(*args, profile, *tail)
        return GeneratorExecutor(*args, profile, *tail)
    return LLMEngine(*args, profile, *tail)
