"""Tests for fissionserve.utils_control — GPU pool, task managers and the app lifecycle."""

import pytest

from conftest import load_manifest
from fissionserve.utils_control import GpuPool
from fissionserve.utils_errors import (
    AppBusyError,
    CapacityExceeded,
    DuplicateAppError,
    NotFoundError,
    PlacementConflict,
    PlacementError,
    UnknownGpuError,
)
from fissionserve.utils_planner import PoolSpec
from fissionserve.utils_profiles import GB

SIGLIP = "google/siglip-so400m-patch14-384"
GEMMA_4B = "google/gemma-3-4b-it"
GEMMA_12B = "google/gemma-3-12b-it"


def _by_model(control):
    return {s.descriptor.unit_task.model_id: s for s in control.task_managers.values()}


# ---------------------------------------------------------------------------
# GPU pool
# ---------------------------------------------------------------------------


class TestGpuPool:

    @pytest.fixture
    def pool(self):
        return GpuPool(PoolSpec.uniform(4, nodes=2))

    def test_allocate_and_release(self, pool):
        pool.allocate([0, 1], "llm-r1", "d1", 10 * GB)
        assert pool.used_gpus() == [0, 1]
        assert pool.free_bytes(0) == 70 * GB
        assert pool.release("llm-r1") == 2
        assert pool.free_gpus() == [0, 1, 2, 3]

    def test_second_owner_conflicts(self, pool):
        pool.allocate([0], "enc-r1", "d1", GB)
        with pytest.raises(PlacementConflict, match="enc-r1"):
            pool.allocate([0], "enc-r2", "d1", GB)

    def test_group_shares_a_gpu_within_capacity(self, pool):
        pool.allocate([2], "talker-r1", "d1", 30 * GB, group="pair-0")
        pool.allocate([2], "generator-r1", "d2", 30 * GB, group="pair-0")
        assert pool.free_bytes(2) == 20 * GB
        with pytest.raises(PlacementConflict):
            pool.allocate([2], "other", "d3", GB, group="pair-1")
        with pytest.raises(CapacityExceeded, match="does not fit GPU 2"):
            pool.allocate([2], "third", "d3", 30 * GB, group="pair-0")

    def test_replica_cannot_span_nodes(self, pool):
        with pytest.raises(PlacementError, match="span nodes"):
            pool.allocate([1, 2], "llm-r1", "d1", GB)

    def test_unknown_gpu(self, pool):
        with pytest.raises(UnknownGpuError):
            pool.allocate([9], "llm-r1", "d1", GB)

    def test_free_spec_skips_used_gpus(self, pool):
        pool.allocate([0], "enc-r1", "d1", GB)
        spec = pool.free_spec()
        assert [(n.node_id, n.gpu_ids) for n in spec.nodes] == [("node0", [1]), ("node1", [2, 3])]

    def test_to_dict_counts(self, pool):
        pool.allocate([3], "enc-r1", "d1", GB)
        data = pool.to_dict()
        assert data["total"] == 4
        assert data["free"] == 3
        assert data["gpus"][3]["allocations"][0]["replica_id"] == "enc-r1"


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------


class TestRegistration:

    def test_arena_shares_one_encoder(self, make_control, gemma_arena):
        control = make_control(gpus=3, placement_policy="minimal")
        control.register_app(gemma_arena)
        managers = _by_model(control)
        assert set(managers) == {SIGLIP, GEMMA_4B, GEMMA_12B}
        assert len(managers[SIGLIP].replicas) == 1
        assert managers[SIGLIP].ref_count == 1
        assert control.pool.used_gpus() == [0, 1, 2]
        # largest weight first
        assert managers[GEMMA_12B].replicas[0].gpu_ids == [0]

    def test_task_managers_are_shared_across_apps(self, make_control, gemma_chat, gemma_arena):
        control = make_control(gpus=4, placement_policy="minimal")
        control.register_app(gemma_chat)
        assert len(control.pool.used_gpus()) == 2
        control.register_app(gemma_arena)
        managers = _by_model(control)
        assert managers[SIGLIP].ref_count == 2
        assert managers[GEMMA_4B].ref_count == 2
        assert managers[GEMMA_12B].ref_count == 1
        assert len(control.pool.used_gpus()) == 3

        control.deregister_app("gemma-chat")
        assert set(_by_model(control)) == {SIGLIP, GEMMA_4B, GEMMA_12B}
        assert _by_model(control)[SIGLIP].ref_count == 1
        assert len(control.pool.used_gpus()) == 3

        control.deregister_app("gemma-arena")
        assert control.task_managers == {}
        assert control.pool.free_gpus() == [0, 1, 2, 3]
        assert not any(control.dispatcher.stats()["replicas"].values())

    def test_duplicate_app(self, make_control, gemma_chat):
        control = make_control(placement_policy="minimal")
        control.register_app(gemma_chat)
        with pytest.raises(DuplicateAppError):
            control.register_app(load_manifest("mllm"))

    def test_oom_is_rejected_before_allocation(self, make_control, gemma_chat):
        control = make_control(gpus=2, gpu_gb=4, placement_policy="minimal")
        with pytest.raises(CapacityExceeded, match="GB per GPU"):
            control.register_app(gemma_chat)
        assert control.pool.free_gpus() == [0, 1]

    def test_insufficient_gpus_rolls_back(self, make_control, gemma_arena):
        control = make_control(gpus=2, placement_policy="minimal")
        with pytest.raises(PlacementError, match="insufficient GPUs"):
            control.register_app(gemma_arena)
        assert control.task_managers == {}
        assert control.pool.free_gpus() == [0, 1]
        assert control.apps == {}

    def test_planner_policy_uses_the_pool(self, make_control, gemma_chat):
        control = make_control(gpus=4)
        control.register_app(gemma_chat)
        managers = _by_model(control)
        assert set(managers) == {SIGLIP, GEMMA_4B}
        assert all(state.replicas for state in managers.values())
        used = [g for state in managers.values() for r in state.replicas for g in r.gpu_ids]
        assert len(used) == len(set(used))
        assert len(used) <= 4

    def test_registry_restore(self, make_control, tmp_registry, gemma_chat):
        tmp_registry.insert(gemma_chat)
        control = make_control(registry=tmp_registry, placement_policy="minimal")
        assert set(control.apps) == {"gemma-chat"}
        assert len(control.task_managers) == 2


# ---------------------------------------------------------------------------
# Deregistration
# ---------------------------------------------------------------------------


class TestDeregistration:

    def test_unknown_app(self, make_control):
        with pytest.raises(NotFoundError):
            make_control().deregister_app("nope")

    def test_busy_app(self, make_control, gemma_chat):
        control = make_control(placement_policy="minimal")
        control.register_app(gemma_chat)
        control.apps["gemma-chat"].in_flight = 1
        with pytest.raises(AppBusyError, match="in-flight"):
            control.deregister_app("gemma-chat")
        assert control.deregister_app("gemma-chat", force=True)
        assert control.pool.free_gpus() == [0, 1, 2, 3]

    def test_deregister_removes_registry_entry(self, make_control, tmp_registry, gemma_chat):
        control = make_control(registry=tmp_registry, placement_policy="minimal")
        control.register_app(gemma_chat)
        assert tmp_registry.has_app("gemma-chat")
        control.deregister_app("gemma-chat")
        assert not tmp_registry.has_app("gemma-chat")


# ---------------------------------------------------------------------------
# Invocation
# ---------------------------------------------------------------------------


class TestInvoke:

    def test_image_chat_streams_every_token(self, make_control, gemma_chat, image_request):
        control = make_control(placement_policy="minimal")
        control.register_app(gemma_chat)
        chunks, trace = control.invoke("gemma-chat", image_request)
        chunks = list(chunks)
        control.clock.run()
        assert chunks
        assert all(c["type"] == "text" for c in chunks)
        assert sum(c["tokens"] for c in chunks) == image_request.output_tokens
        assert trace.ok
        assert trace.latency > 0
        assert control.apps["gemma-chat"].in_flight == 0
        metrics = control.metrics()
        assert metrics["requests"] == 1
        assert metrics["completed"] == 1
        assert metrics["mean_latency_ms"] == pytest.approx(trace.latency)

    def test_arena_tags_each_model(self, make_control, gemma_arena, image_request):
        control = make_control(gpus=3, placement_policy="minimal")
        control.register_app(gemma_arena)
        chunks, _ = control.invoke("gemma-arena", image_request)
        models = {c["model"] for c in chunks}
        assert models == {"gemma-4b", "gemma-12b"}

    def test_submit_reports_through_callback(self, make_control, gemma_chat, image_request):
        control = make_control(placement_policy="minimal")
        control.register_app(gemma_chat)
        done = []
        control.submit("gemma-chat", image_request, on_done=done.append)
        control.clock.run()
        assert len(done) == 1
        assert done[0].ok

    def test_unknown_app(self, make_control, image_request):
        with pytest.raises(NotFoundError):
            make_control().invoke("nope", image_request)

    def test_state_and_utilization(self, make_control, gemma_chat, image_request):
        control = make_control(placement_policy="minimal")
        control.register_app(gemma_chat)
        list(control.invoke("gemma-chat", image_request)[0])
        control.clock.run()
        state = control.state()
        assert state["apps"]["gemma-chat"]["served"] == 1
        assert state["pool"]["free"] == 2
        utilization = control.utilization()
        assert len(utilization) == 2
        assert all(0.0 < value <= 1.0 for value in utilization.values())
