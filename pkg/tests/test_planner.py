"""Tests for fissionserve.utils_planner — capacity model, packing and the max-min search."""

import os
import math
import random
import pytest

from conftest import MIXES_DIR, load_manifest
from fissionserve.utils_errors import PlannerInfeasible, TractabilityError
from fissionserve.utils_planner import (
    PAIR_NAME,
    ComponentPlan,
    DeploymentPlan,
    NodeSpec,
    PoolSpec,
    build_components,
    capacity,
    component_demand,
    default_mix,
    feasible_tp,
    monolith_variant,
    oracle_plan,
    pack,
    plan,
    plan_app,
)
from fissionserve.utils_profiles import GB, profile_from_dict
from fissionserve.utils_tasks import (
    TaskClass,
    TaskDescriptor,
    UnitTaskSpec,
    validate_manifest,
)
from fissionserve.utils_workload import WorkloadMix


def _mix(name):
    return WorkloadMix.load(os.path.join(MIXES_DIR, f"{name}.json"))


def _scenario(catalog, name):
    validated = validate_manifest(load_manifest(name))
    return validated, [catalog.descriptor_for(unit) for unit in validated.units.values()]


def _qwen3(catalog):
    return _scenario(catalog, "qwen3-omni")


def _llm_profile(rng, name="llm", kind="LLMPrefillDecode", tp_scaling=None):
    return profile_from_dict(
        name,
        {
            "kind": kind,
            "decode_a_ms": rng.uniform(5, 40),
            "decode_b_ms": rng.uniform(0.1, 2.0),
            "prefill_ms_per_token": rng.uniform(0.0, 0.05),
            "max_batch": rng.choice([8, 32, 64]),
            "tp_scaling": tp_scaling or {"1": 1.0, "2": rng.uniform(1.2, 1.95)},
        },
    )


def _random_instance(rng):
    """One to four encoders feeding an LLM, sometimes with a talker+generator pair."""
    audio = rng.random() < 0.4
    descriptors, profiles, items = [], {}, {}
    for index in range(rng.randint(1, 3 if audio else 4)):
        modality = rng.choice(["Image", "Video", "Audio"])
        ref = f"enc{index}"
        descriptors.append(
            TaskDescriptor(UnitTaskSpec.encoder([f"acme/enc{index}"], modality), rng.choice([1, 2]) * GB, ref, {1})
        )
        profiles[ref] = profile_from_dict(
            ref, {"kind": "Encoder", "base_ms": rng.uniform(2, 20), "per_item_ms": rng.uniform(5, 40)}
        )
        items[modality] = {"count": rng.randint(1, 4)}
    llm = UnitTaskSpec(TaskClass.LLM, "acme/llm", recv_embeds=True)
    descriptors.append(TaskDescriptor(llm, rng.choice([8, 16, 30, 100]) * GB, "llm", {1, 2}))
    profiles["llm"] = _llm_profile(rng)
    if audio:
        talker = UnitTaskSpec(TaskClass.LLM, "acme/voice", extra_config={"role": "talker"})
        generator = UnitTaskSpec(TaskClass.GENERATOR, "acme/voice", modality="Audio")
        descriptors.append(TaskDescriptor(talker, 4 * GB, "talker", {1}))
        descriptors.append(TaskDescriptor(generator, 1 * GB, "generator", {1}))
        profiles["talker"] = _llm_profile(rng, "talker", "AutoregressiveTalker", {"1": 1.0})
        profiles["generator"] = profile_from_dict(
            "generator",
            {"kind": "Generator", "per_chunk_ms": rng.uniform(10, 60), "tokens_per_chunk": 25, "tp_scaling": {"1": 1.0}},
        )
    mix = WorkloadMix.from_dict(
        {
            "name": "random",
            "classes": [
                {
                    "prompt_tokens": rng.randint(16, 256),
                    "output_tokens": rng.randint(16, 256),
                    "items": items,
                    "audio_output": audio,
                    "audio_tokens": rng.randint(50, 300) if audio else 0,
                }
            ],
        }
    )
    gpus = rng.randint(4, 16)
    pool = PoolSpec.uniform(gpus, nodes=rng.choice([1, 2]))
    return descriptors, profiles, mix, pool


# ---------------------------------------------------------------------------
# Pool and packing
# ---------------------------------------------------------------------------


class TestPacking:

    def test_uniform_pool(self):
        pool = PoolSpec.uniform(5, nodes=2)
        assert [n.gpu_ids for n in pool.nodes] == [[0, 1, 2], [3, 4]]
        assert pool.gpu_count == 5
        assert pool.node_of(4).node_id == "node1"
        assert pool.node_of(9) is None

    def test_empty_pool(self):
        with pytest.raises(PlannerInfeasible, match="empty"):
            PoolSpec.uniform(0)

    def test_replicas_stay_on_one_node(self):
        pool = PoolSpec.uniform(5, nodes=2)
        replicas = [(0, 2, GB), (1, 2, GB), (2, 1, GB)]
        assert pack(replicas, pool) == [[0, 1], [3, 4], [2]]

    def test_fragmentation_is_infeasible(self):
        # 4 GPUs in total, but a TP-2 replica cannot straddle two 1-GPU leftovers
        pool = PoolSpec([NodeSpec("a", [0, 1, 2]), NodeSpec("b", [3])])
        assert pack([(0, 2, GB), (1, 2, GB)], pool) is None

    def test_weight_must_fit_per_gpu(self):
        pool = PoolSpec([NodeSpec("small", [0, 1], 24 * GB), NodeSpec("big", [2, 3], 80 * GB)])
        assert pack([(0, 1, 40 * GB)], pool) == [[2]]
        assert pack([(0, 1, 40 * GB)] * 3, pool) is None

    def test_too_many_gpus(self):
        assert pack([(0, 1, GB)] * 5, PoolSpec.uniform(4)) is None


# ---------------------------------------------------------------------------
# Components and the capacity model
# ---------------------------------------------------------------------------


class TestComponents:

    def test_talker_and_generator_fuse(self, catalog, profiles):
        _, descriptors = _qwen3(catalog)
        components = build_components(descriptors, profiles)
        assert [c.name for c in components] == ["thinker", PAIR_NAME]
        pair = components[1]
        assert pair.weight_bytes == 10 * GB
        assert pair.allowed_tp == [1]
        assert components[0].allowed_tp == [2, 4]

    def test_unfused_pair(self, catalog, profiles):
        _, descriptors = _qwen3(catalog)
        names = [c.name for c in build_components(descriptors, profiles, fuse_pairs=False)]
        assert names == ["thinker", "talker", "generator"]

    def test_shared_encoder_counts_every_use(self, catalog, profiles):
        validated = validate_manifest(load_manifest("gemma-arena"))
        descriptors = [catalog.descriptor_for(u) for u in validated.units.values()]
        components = build_components(descriptors, profiles, uses=validated.uses)
        encoder = next(c for c in components if c.role == "encoder")
        assert encoder.uses == 2
        demand = component_demand(_mix("mllm"), components)
        # 0.8 * mean(1..3) images per request, once per model
        assert demand[encoder.name] == pytest.approx(2 * 0.8 * 2.0)
        assert sorted(c.name for c in components if c.role == "llm") == ["llm", "llm#2"]

    def test_image_generator_is_its_own_component(self, catalog, profiles):
        _, descriptors = _scenario(catalog, "imagegen")
        components = build_components(descriptors, profiles)
        assert [c.name for c in components] == ["encoder:Image", "llm", "generator:Image"]
        demand = component_demand(_mix("imagegen"), components)
        assert demand["encoder:Image"] == pytest.approx(0.3)
        assert demand["llm"] == pytest.approx(0.7 * 576 + 0.3 * 128)
        # only text-to-image requests reach the decoder
        assert demand["generator:Image"] == pytest.approx(0.7 * 576)

    def test_thinker_capacity(self, catalog, profiles):
        _, descriptors = _qwen3(catalog)
        thinker = build_components(descriptors, profiles)[0]
        mix = _mix("qwen3-omni")
        # batch 64, 300-token prompts amortized over 120 output tokens
        step = (30.0 + 0.5 * 64 + 64 / 120 * 0.02 * 300) / 1.8
        assert capacity(thinker, 2, mix=mix, capacity_bytes=80 * GB) == pytest.approx(64_000 / step)
        assert capacity(thinker, 2, replicas=3, mix=mix, capacity_bytes=80 * GB) == pytest.approx(3 * 64_000 / step)

    def test_disallowed_tp(self, catalog, profiles):
        _, descriptors = _qwen3(catalog)
        thinker = build_components(descriptors, profiles)[0]
        with pytest.raises(PlannerInfeasible, match="TP-1"):
            capacity(thinker, 1)

    def test_feasible_tp_respects_memory(self, catalog, profiles):
        _, descriptors = _qwen3(catalog)
        thinker = build_components(descriptors, profiles)[0]
        assert feasible_tp(thinker, PoolSpec.uniform(8)) == [2, 4]
        assert feasible_tp(thinker, PoolSpec.uniform(8, capacity_bytes=40 * GB)) == [4]
        with pytest.raises(PlannerInfeasible) as excinfo:
            feasible_tp(thinker, PoolSpec.uniform(2, capacity_bytes=40 * GB))
        assert excinfo.value.code == "infeasible"


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


class TestPlan:

    def test_qwen3_on_eight_gpus(self, catalog, profiles):
        validated, descriptors = _qwen3(catalog)
        result = plan(descriptors, profiles, _mix("qwen3-omni"), PoolSpec.uniform(8), uses=validated.uses)
        thinker, pair = result.component("thinker"), result.component(PAIR_NAME)
        assert (thinker.tp_degree, len(thinker.replicas)) == (2, 1)
        # a sixth pair would not raise the thinker-bound objective
        assert (pair.tp_degree, len(pair.replicas)) == (1, 5)
        assert result.objective_value == pytest.approx(14.72, abs=0.01)
        assert result.gpus_used == 7
        assert result.table().count("free") == 1

    def test_qwen3_spare_gpu_goes_to_the_audio_path(self, catalog, profiles):
        validated, descriptors = _qwen3(catalog)
        result = plan(
            descriptors, profiles, _mix("qwen3-omni"), PoolSpec.uniform(8), uses=validated.uses, fill_spare=True
        )
        assert len(result.component("thinker").replicas) == 1
        assert len(result.component(PAIR_NAME).replicas) == 6
        assert result.objective_value == pytest.approx(14.72, abs=0.01)
        assert result.gpus_used == 8

    def test_qwen3_on_two_nodes(self, catalog, profiles):
        validated, descriptors = _qwen3(catalog)
        pool = PoolSpec.uniform(16, nodes=2)
        result = plan(descriptors, profiles, _mix("qwen3-omni"), pool, uses=validated.uses)
        assert len(result.component("thinker").replicas) == 3
        assert len(result.component(PAIR_NAME).replicas) == 10
        assert result.objective_value == pytest.approx(31.30, abs=0.01)
        assert result.gpus_used == 16
        result.check()

    def test_qwen3_doubling_the_pool_more_than_doubles_the_objective(self, catalog, profiles):
        validated, descriptors = _qwen3(catalog)
        mix = _mix("qwen3-omni")
        eight = plan(descriptors, profiles, mix, PoolSpec.uniform(8), uses=validated.uses)
        sixteen = plan(descriptors, profiles, mix, PoolSpec.uniform(16, nodes=2), uses=validated.uses)
        assert sixteen.objective_value / eight.objective_value >= 2.0

    def test_image_generation_on_eight_gpus(self, catalog, profiles):
        validated, descriptors = _scenario(catalog, "imagegen")
        result = plan(descriptors, profiles, _mix("imagegen"), PoolSpec.uniform(8), uses=validated.uses)
        llm, decoder = result.component("llm"), result.component("generator:Image")
        assert (llm.tp_degree, len(llm.replicas)) == (1, 4)
        assert (decoder.tp_degree, len(decoder.replicas)) == (1, 3)
        assert len(result.component("encoder:Image").replicas) == 1
        assert result.objective_value == pytest.approx(26.645, abs=0.01)
        assert result.gpus_used == 8

    def test_fewest_gpus_win_at_equal_objective(self):
        encoder = UnitTaskSpec.encoder(["acme/vit"], "Image")
        llm = UnitTaskSpec(TaskClass.LLM, "acme/llm", recv_embeds=True)
        descriptors = [TaskDescriptor(encoder, 1 * GB, "enc", {1}), TaskDescriptor(llm, 100 * GB, "llm", {2})]
        profiles = {
            "enc": profile_from_dict("enc", {"kind": "Encoder", "base_ms": 2.0, "per_item_ms": 5.0}),
            "llm": profile_from_dict(
                "llm",
                {
                    "kind": "LLMPrefillDecode",
                    "decode_a_ms": 30.0,
                    "decode_b_ms": 0.5,
                    "max_batch": 8,
                    "tp_scaling": {"1": 1.0, "2": 1.8},
                },
            ),
        }
        mix = WorkloadMix.from_dict(
            {"name": "one", "classes": [{"prompt_tokens": 64, "output_tokens": 100, "items": {"Image": {"count": 1}}}]}
        )
        pool = PoolSpec.uniform(4)
        fast, exact = plan(descriptors, profiles, mix, pool), oracle_plan(descriptors, profiles, mix, pool)
        for result in (fast, exact):
            # the LLM is the bottleneck and a second TP-2 replica does not fit next to the encoder
            assert result.gpus_used == 3
            assert len(result.component("encoder:Image").replicas) == 1
        assert fast.to_dict()["components"] == exact.to_dict()["components"]
        filled = plan(descriptors, profiles, mix, pool, fill_spare=True)
        assert filled.gpus_used == 4
        assert filled.objective_value == pytest.approx(fast.objective_value)

    def test_qwen3_monolith_does_not_fit(self, catalog, profiles):
        validated = validate_manifest(load_manifest("qwen3-omni"))
        result = plan_app(validated, catalog, profiles, _mix("qwen3-omni"), PoolSpec.uniform(8))
        assert result.mode == "fission"
        assert result.alternatives["monolith"] is None
        assert "alternative monolith: OOM" in result.table()

    def test_monolith_alone_is_oom(self, catalog, profiles):
        validated = validate_manifest(load_manifest("qwen3-omni"))
        monolith = monolith_variant(validated, catalog)
        with pytest.raises(PlannerInfeasible) as excinfo:
            plan([monolith], profiles, _mix("qwen3-omni"), PoolSpec.uniform(8))
        assert excinfo.value.details.get("oom") is True

    def test_fission_beats_monolith_on_qwen25(self, catalog, profiles):
        validated = validate_manifest(load_manifest("qwen25-omni"))
        result = plan_app(validated, catalog, profiles, _mix("qwen25-omni"), PoolSpec.uniform(8))
        assert result.mode == "fission"
        assert result.objective_value == pytest.approx(10.117, abs=0.01)
        assert result.alternatives["monolith"] == pytest.approx(8 * 0.3508, rel=0.01)
        assert result.alternatives["fission"] / result.alternatives["monolith"] >= 3

    def test_monolith_wins_a_tie(self, catalog, profiles):
        validated = validate_manifest(load_manifest("qwen25-omni"))
        monolith = monolith_variant(validated, catalog)
        result = plan([monolith], profiles, _mix("qwen25-omni"), PoolSpec.uniform(2), monolith=monolith)
        assert result.mode == "monolith"
        assert len(result.components[0].replicas) == 2

    def test_not_enough_gpus(self, catalog, profiles):
        _, descriptors = _qwen3(catalog)
        with pytest.raises(PlannerInfeasible, match="do not all fit"):
            plan(descriptors, profiles, _mix("qwen3-omni"), PoolSpec.uniform(2))

    def test_default_mix(self, qwen25_omni):
        mix = default_mix(qwen25_omni)
        (only,) = mix.classes
        assert only.audio_output
        assert only.mean_items() == 2.0
        assert only.mean_audio_tokens == 200

    def test_default_mix_for_image_generation(self, imagegen):
        (only,) = default_mix(imagegen).classes
        assert only.image_output
        assert not only.audio_output
        assert only.mean_image_tokens == 128

    def test_oracle_matches_search(self):
        rng = random.Random(2024)
        for _ in range(200):
            descriptors, profiles, mix, pool = _random_instance(rng)
            fast = plan(descriptors, profiles, mix, pool)
            exact = oracle_plan(descriptors, profiles, mix, pool)
            assert exact.exact
            assert fast.objective_value == pytest.approx(exact.objective_value, rel=1e-6)
            assert fast.gpus_used == exact.gpus_used

    @pytest.mark.parametrize("scenario,gpus,nodes", [("qwen3-omni", 8, 1), ("qwen3-omni", 16, 2), ("qwen25-omni", 8, 1), ("imagegen", 8, 1)])
    def test_oracle_agrees_on_committed_scenarios(self, catalog, profiles, scenario, gpus, nodes):
        validated, descriptors = _scenario(catalog, scenario)
        pool = PoolSpec.uniform(gpus, nodes=nodes)
        fast = plan(descriptors, profiles, _mix(scenario), pool, uses=validated.uses)
        exact = oracle_plan(descriptors, profiles, _mix(scenario), pool, uses=validated.uses)
        assert exact.objective_value == pytest.approx(fast.objective_value, rel=1e-9)
        assert exact.to_dict()["components"] == fast.to_dict()["components"]

    def test_oracle_limits(self):
        descriptors, profiles, mix, _ = _random_instance(random.Random(1))
        with pytest.raises(TractabilityError, match="16 GPUs"):
            oracle_plan(descriptors, profiles, mix, PoolSpec.uniform(17, nodes=3))


# ---------------------------------------------------------------------------
# Plan documents
# ---------------------------------------------------------------------------


class TestDeploymentPlan:

    def _plan(self, replicas, tp=1, weight=GB):
        component = ComponentPlan("llm", "llm", ["d" * 64], ["L:llm"], tp, replicas, 100.0, 50.0, weight)
        return DeploymentPlan("fission", [component], 2.0, PoolSpec.uniform(4, nodes=2))

    def test_check_accepts_a_valid_plan(self):
        assert self._plan([[0, 1], [2, 3]], tp=2).check()

    def test_replica_spanning_nodes(self):
        with pytest.raises(PlannerInfeasible, match="spans nodes"):
            self._plan([[1, 2]], tp=2).check()

    def test_gpu_reuse(self):
        with pytest.raises(PlannerInfeasible, match="reused"):
            self._plan([[0], [0]]).check()

    def test_wrong_tp(self):
        with pytest.raises(PlannerInfeasible, match="TP-2"):
            self._plan([[0]], tp=2).check()

    def test_weight_over_capacity(self):
        with pytest.raises(PlannerInfeasible, match="capacity"):
            self._plan([[0]], weight=100 * GB).check()

    def test_component_lookup_and_ratio(self):
        result = self._plan([[0], [1]])
        assert result.component("llm").capacity == 200.0
        assert result.component("llm").ratio == 4.0
        with pytest.raises(KeyError):
            result.component("encoder")

    def test_placements_group_fused_pairs(self):
        pair = ComponentPlan(PAIR_NAME, "pair", ["t" * 64, "g" * 64], [], 1, [[0], [1]], 10.0, 5.0, GB)
        result = DeploymentPlan("fission", [pair], 2.0, PoolSpec.uniform(2))
        placements = result.placements()
        assert placements["t" * 64] == [([0], f"{PAIR_NAME}/0"), ([1], f"{PAIR_NAME}/1")]
        assert placements["g" * 64][0] == ([0], f"{PAIR_NAME}/0")

    def test_save_and_load(self, tmp_path, catalog, profiles):
        validated, descriptors = _qwen3(catalog)
        result = plan(descriptors, profiles, _mix("qwen3-omni"), PoolSpec.uniform(8), uses=validated.uses)
        path = tmp_path / "plan.json"
        result.save(path)
        again = DeploymentPlan.load(path)
        assert again.to_dict() == result.to_dict()
        assert again.mix_name == "qwen3-omni"

    def test_infinite_objective_serializes_as_null(self):
        result = self._plan([[0]])
        result.objective_value = math.inf
        assert result.to_dict()["objective_value"] is None
        assert "objective inf" in result.table()

    def test_table_marks_free_gpus(self):
        table = self._plan([[0]]).table()
        assert "node0" in table and "node1" in table
        assert "llm.0" in table
        assert table.count("free") == 3
