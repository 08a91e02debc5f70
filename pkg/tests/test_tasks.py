"""Tests for fissionserve.utils_tasks — unit tasks, composites, requests and manifests."""

import json
import pytest

from fissionserve.utils_errors import DuplicateAppError, ManifestError, TaskValidationError
from fissionserve.utils_tasks import (
    AppManifest,
    ChatRequest,
    MediaItem,
    Modality,
    TaskClass,
    UnitTaskSpec,
    canonical_bytes,
    canonical_hash,
    expand_composite,
    make_composite,
    task_label,
    validate_manifest,
)

QWEN = "Qwen/Qwen2.5-Omni-7B"
SIGLIP = "google/siglip-so400m-patch14-384"


# ---------------------------------------------------------------------------
# Unit task specs
# ---------------------------------------------------------------------------


class TestUnitTaskSpec:

    def test_encoder_requires_modality(self):
        spec = UnitTaskSpec(TaskClass.ENCODER, QWEN, encoder_ids={QWEN})
        with pytest.raises(TaskValidationError, match="non-Text modality"):
            spec.validate()

    def test_encoder_rejects_text(self):
        spec = UnitTaskSpec(TaskClass.ENCODER, QWEN, modality=Modality.TEXT, encoder_ids={QWEN})
        with pytest.raises(TaskValidationError):
            spec.validate()

    def test_encoder_requires_ids(self):
        with pytest.raises(TaskValidationError):
            UnitTaskSpec.encoder([], Modality.IMAGE)

    def test_encoder_ids_only_on_encoders(self):
        spec = UnitTaskSpec(TaskClass.LLM, QWEN, encoder_ids={QWEN})
        with pytest.raises(TaskValidationError, match="only valid on Encoder"):
            spec.validate()

    def test_generator_requires_modality(self):
        with pytest.raises(TaskValidationError):
            UnitTaskSpec(TaskClass.GENERATOR, QWEN).validate()

    def test_llm_rejects_modality(self):
        with pytest.raises(TaskValidationError):
            UnitTaskSpec(TaskClass.LLM, QWEN, modality=Modality.AUDIO).validate()

    def test_embedding_flags_only_on_llm(self):
        spec = UnitTaskSpec(TaskClass.GENERATOR, QWEN, modality=Modality.AUDIO, recv_embeds=True)
        with pytest.raises(TaskValidationError):
            spec.validate()

    def test_extra_config_must_be_scalar(self):
        spec = UnitTaskSpec(TaskClass.LLM, QWEN, extra_config={"role": ["thinker"]})
        with pytest.raises(TaskValidationError, match="scalar"):
            spec.validate()

    def test_unknown_task_class(self):
        with pytest.raises(TaskValidationError, match="unknown task class"):
            UnitTaskSpec("Decoder", QWEN)

    def test_all_errors_reported_together(self):
        spec = UnitTaskSpec(TaskClass.ENCODER, "", modality=None)
        with pytest.raises(TaskValidationError) as excinfo:
            spec.validate()
        assert "model_id" in excinfo.value.message
        assert "encoder_ids" in excinfo.value.message

    def test_role_comes_from_extra_config(self):
        spec = UnitTaskSpec(TaskClass.LLM, QWEN, extra_config={"role": "talker"})
        assert spec.role == "talker"
        assert UnitTaskSpec(TaskClass.LLM, QWEN).role is None

    def test_dict_round_trip_keeps_identity(self):
        spec = UnitTaskSpec(
            TaskClass.LLM, QWEN, recv_embeds=True, emit_hidden_states=True, extra_config={"role": "thinker"}
        )
        assert UnitTaskSpec.from_dict(spec.to_dict()) == spec

    def test_from_dict_missing_field(self):
        with pytest.raises(TaskValidationError, match="missing field"):
            UnitTaskSpec.from_dict({"model_id": QWEN})


# ---------------------------------------------------------------------------
# Canonical hashing
# ---------------------------------------------------------------------------


class TestCanonicalHash:

    def test_structurally_equal_specs_share_a_digest(self):
        a = UnitTaskSpec(TaskClass.LLM, QWEN, extra_config={"role": "thinker", "x": 1})
        b = UnitTaskSpec(TaskClass.LLM, QWEN, extra_config={"x": 1, "role": "thinker"})
        assert canonical_hash(a) == canonical_hash(b)
        assert a == b
        assert len({a, b}) == 1

    def test_encoder_id_order_does_not_matter(self):
        a = UnitTaskSpec.encoder(["m-b", "m-a"], Modality.IMAGE)
        b = UnitTaskSpec.encoder(["m-a", "m-b"], Modality.IMAGE)
        assert canonical_bytes(a) == canonical_bytes(b)
        assert a.model_id == "m-a"

    def test_any_field_change_changes_the_digest(self):
        base = UnitTaskSpec(TaskClass.LLM, QWEN, extra_config={"role": "thinker"})
        variants = [
            UnitTaskSpec(TaskClass.LLM, "other", extra_config={"role": "thinker"}),
            UnitTaskSpec(TaskClass.LLM, QWEN, recv_embeds=True, extra_config={"role": "thinker"}),
            UnitTaskSpec(TaskClass.LLM, QWEN, emit_hidden_states=True, extra_config={"role": "thinker"}),
            UnitTaskSpec(TaskClass.LLM, QWEN, extra_config={"role": "talker"}),
        ]
        digests = {canonical_hash(v) for v in variants}
        assert canonical_hash(base) not in digests
        assert len(digests) == len(variants)

    def test_digest_is_sha256_hex(self):
        digest = canonical_hash(UnitTaskSpec(TaskClass.LLM, QWEN))
        assert len(digest) == 64
        int(digest, 16)

    def test_invalid_spec_has_no_digest(self):
        with pytest.raises(TaskValidationError):
            canonical_hash(UnitTaskSpec(TaskClass.GENERATOR, QWEN))

    def test_labels(self):
        assert task_label(UnitTaskSpec.encoder([QWEN], Modality.IMAGE)) == "E:Image"
        assert task_label(UnitTaskSpec(TaskClass.LLM, QWEN, extra_config={"role": "thinker"})) == "L:thinker"
        assert task_label(UnitTaskSpec(TaskClass.LLM, QWEN)) == "L:llm"
        assert task_label(UnitTaskSpec(TaskClass.GENERATOR, QWEN, modality="Audio")) == "G:Audio"


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------


class TestComposites:

    def test_mllm_with_fission(self):
        spec = make_composite("MLLMTask", {"model_id": "gemma", "encoder_ids": [SIGLIP], "modalities": ["Image", "Video"]})
        assert list(spec.children) == ["encoder_image", "encoder_video", "llm"]
        assert spec.children["llm"].recv_embeds is True
        assert spec.children["encoder_image"].model_id == SIGLIP

    def test_mllm_without_fission_has_no_encoders(self):
        spec = make_composite("MLLMTask", {"model_id": "gemma", "encoder_fission": False})
        assert list(spec.children) == ["llm"]
        assert spec.children["llm"].recv_embeds is False

    def test_omni_children(self):
        spec = make_composite("OmniTask", {"model_id": QWEN, "modalities": ["Audio"]})
        assert list(spec.children) == ["encoder_audio", "thinker", "talker", "generator"]
        thinker = spec.children["thinker"]
        assert thinker.emit_hidden_states and thinker.recv_embeds
        assert spec.children["talker"].role == "talker"
        assert spec.children["generator"].modality is Modality.AUDIO

    def test_omni_text_only(self):
        spec = make_composite("OmniTask", {"model_id": QWEN, "audio_output": False, "encoder_fission": False})
        assert list(spec.children) == ["thinker"]
        assert not spec.children["thinker"].emit_hidden_states

    def test_omni_monolith(self):
        spec = make_composite("OmniTask", {"model_id": QWEN, "fission": False})
        assert list(spec.children) == ["monolith"]
        monolith = spec.children["monolith"]
        assert monolith.role == "monolith"
        assert monolith.extra_config["audio_output"] is True

    def test_children_are_a_function_of_config(self):
        config = {"model_id": QWEN, "modalities": ["Image", "Audio"]}
        first = expand_composite(make_composite("OmniTask", config))
        second = expand_composite(make_composite("OmniTask", dict(config)))
        assert [canonical_hash(u) for u in first] == [canonical_hash(u) for u in second]

    def test_text_modality_is_not_encoded(self):
        spec = make_composite("MLLMTask", {"model_id": "gemma", "modalities": ["Text", "Image"]})
        assert "encoder_text" not in spec.children

    def test_unknown_composite(self):
        with pytest.raises(TaskValidationError, match="unknown composite"):
            make_composite("DiffusionTask", {"model_id": "x"})

    def test_missing_config_key(self):
        with pytest.raises(TaskValidationError, match="model_id"):
            make_composite("MLLMTask", {})

    def test_nested_config_rejected(self):
        with pytest.raises(TaskValidationError):
            make_composite("MLLMTask", {"model_id": "gemma", "extra": {"a": 1}})


# ---------------------------------------------------------------------------
# Requests
# ---------------------------------------------------------------------------


class TestChatRequest:

    def test_prompt_words_become_tokens(self):
        request = ChatRequest.from_dict({"prompt": "describe this picture please", "output_tokens": 8})
        assert request.prompt_tokens == 4
        assert request.output_tokens == 8
        assert request.request_id

    def test_items_parse(self):
        request = ChatRequest.from_dict(
            {"prompt_tokens": 5, "items": [{"modality": "Audio", "seconds": 2.5}, {"modality": "Image", "width": 10, "height": 20}]}
        )
        assert [i.modality for i in request.items] == [Modality.AUDIO, Modality.IMAGE]
        assert request.items[0].raw_bytes == 80000
        assert request.items[1].raw_bytes == 600

    def test_copy_does_not_share_embeddings(self):
        request = ChatRequest(items=[MediaItem("Image", 4, 4)])
        request.multimodal_embeddings.append("ref")
        clone = request.copy()
        assert clone.multimodal_embeddings == []
        assert clone.items == request.items
        assert clone.items is not request.items

    def test_summary_omits_text_items(self):
        request = ChatRequest(items=[MediaItem("Text"), MediaItem("Image", 4, 4)])
        assert [i["modality"] for i in request.summary()["items"]] == ["Image"]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


class TestManifest:

    def test_from_json_reports_every_bad_task(self):
        text = json.dumps(
            {
                "app_id": "bad",
                "serve_entry": "mllm_chat",
                "tasks": {"a": {"composite": "Nope"}, "b": {"something": 1}},
            }
        )
        with pytest.raises(ManifestError) as excinfo:
            AppManifest.from_json(text)
        assert len(excinfo.value.errors) == 2

    def test_missing_top_level_keys(self):
        with pytest.raises(ManifestError) as excinfo:
            AppManifest.from_dict({"tasks": {}})
        assert len(excinfo.value.errors) == 2

    def test_not_json(self):
        with pytest.raises(ManifestError, match="not valid JSON"):
            AppManifest.from_json("{app_id:")

    def test_dict_round_trip(self, gemma_arena):
        again = AppManifest.from_dict(gemma_arena.to_dict())
        assert again.to_dict() == gemma_arena.to_dict()

    def test_arena_dedups_the_shared_encoder(self, gemma_arena):
        validated = validate_manifest(gemma_arena)
        assert len(validated.units) == 3
        encoders = [d for d, u in validated.units.items() if u.task_class is TaskClass.ENCODER]
        assert len(encoders) == 1
        assert validated.uses[encoders[0]] == 2
        assert encoders[0] in validated.task_units["gemma-4b"]
        assert encoders[0] in validated.task_units["gemma-12b"]

    def test_duplicate_app(self, gemma_chat):
        with pytest.raises(DuplicateAppError):
            validate_manifest(gemma_chat, existing_app_ids={"gemma-chat"})

    def test_unknown_serve_entry(self):
        manifest = AppManifest.from_dict(
            {"app_id": "x", "serve_entry": "karaoke", "tasks": {"mllm": {"composite": "MLLMTask", "config": {"model_id": "m"}}}}
        )
        with pytest.raises(ManifestError, match="unknown serve_entry"):
            validate_manifest(manifest)

    def test_serve_entry_checks_its_tasks(self):
        manifest = AppManifest.from_dict(
            {"app_id": "x", "serve_entry": "omni_chat", "tasks": {"mllm": {"composite": "MLLMTask", "config": {"model_id": "m"}}}}
        )
        with pytest.raises(ManifestError, match="OmniTask"):
            validate_manifest(manifest)

    def test_empty_app_id_and_tasks(self):
        manifest = AppManifest(app_id="", tasks={}, serve_entry="mllm_chat")
        with pytest.raises(ManifestError) as excinfo:
            validate_manifest(manifest)
        assert any("app_id" in e for e in excinfo.value.errors)
        assert any("no tasks" in e for e in excinfo.value.errors)

    def test_invalid_unit_task(self):
        manifest = AppManifest.from_dict(
            {
                "app_id": "x",
                "serve_entry": "gemma_arena",
                "tasks": {"g": {"unit": {"task_class": "Generator", "model_id": "m"}}},
            }
        )
        with pytest.raises(ManifestError) as excinfo:
            validate_manifest(manifest)
        assert any("Generator requires a modality" in e for e in excinfo.value.errors)
