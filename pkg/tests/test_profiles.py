"""Tests for fissionserve.utils_profiles — component profiles, closed forms and the catalog."""

import json
import pytest

from conftest import load_fixture
from fissionserve.utils_errors import ProfileError, TaskValidationError
from fissionserve.utils_profiles import (
    ModelCatalog,
    ProfileKind,
    embedding_shape,
    encoder_rate,
    generator_rate,
    llm_rate,
    load_profiles,
    profile_from_dict,
)
from fissionserve.utils_tasks import MediaItem, Modality, TaskClass, UnitTaskSpec

SHAPES = load_fixture("shape_rules.json")["cases"]


def _llm(**overrides):
    body = {"kind": "LLMPrefillDecode", "decode_a_ms": 10.0, "decode_b_ms": 0.5, "max_batch": 8}
    body.update(overrides)
    return profile_from_dict("llm", body)


# ---------------------------------------------------------------------------
# Profile validation and loading
# ---------------------------------------------------------------------------


class TestProfileValidation:

    def test_shipped_profiles_load(self, profiles):
        assert profiles["qwen3-omni-thinker"].kind is ProfileKind.LLM
        assert profiles["qwen25-omni-generator"].kind is ProfileKind.GENERATOR
        assert "_comment" not in profiles

    def test_unknown_kind(self):
        with pytest.raises(ProfileError, match="unknown kind"):
            profile_from_dict("x", {"kind": "Vocoder"})

    def test_missing_kind(self):
        with pytest.raises(ProfileError, match="missing kind"):
            profile_from_dict("x", {"base_ms": 1.0})

    def test_unknown_field(self):
        with pytest.raises(ProfileError, match="unknown fields"):
            profile_from_dict("x", {"kind": "Encoder", "base_ms": 1, "per_item_ms": 1, "speed": 3})

    def test_encoder_needs_positive_times(self):
        with pytest.raises(ProfileError, match="per_item_ms"):
            profile_from_dict("x", {"kind": "Encoder", "base_ms": 1.0})

    def test_tp_scaling_rules(self):
        with pytest.raises(ProfileError, match="tp_scaling\\[1\\]"):
            _llm(tp_scaling={"1": 0.9})
        with pytest.raises(ProfileError, match="nondecreasing"):
            _llm(tp_scaling={"1": 1.0, "2": 1.8, "4": 1.5})
        with pytest.raises(ProfileError, match="exceeds"):
            _llm(tp_scaling={"1": 1.0, "2": 2.5})

    def test_missing_tp_degree(self):
        with pytest.raises(ProfileError, match="TP-8"):
            _llm(tp_scaling={"1": 1.0}).speedup(8)

    def test_later_files_override(self, tmp_path):
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        first.write_text(json.dumps({"enc": {"kind": "Encoder", "base_ms": 1, "per_item_ms": 1}}))
        second.write_text(json.dumps({"enc": {"kind": "Encoder", "base_ms": 9, "per_item_ms": 1}}))
        assert load_profiles([first, second])["enc"].base_ms == 9

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ProfileError, match="cannot read"):
            load_profiles(tmp_path / "missing.json")


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


class TestClosedForms:

    def test_encoder_time_and_rate(self):
        encoder = profile_from_dict("e", {"kind": "Encoder", "base_ms": 8.0, "per_item_ms": 16.0})
        assert encoder.encode_ms(3) == pytest.approx(56.0)
        assert encoder_rate(encoder) == pytest.approx(1000.0 / 24.0)

    def test_step_time_scales_with_tp(self):
        llm = _llm(tp_scaling={"1": 1.0, "2": 1.8})
        assert llm.step_ms(4) == pytest.approx(12.0)
        assert llm.step_ms(4, tp=2) == pytest.approx(12.0 / 1.8)
        assert llm.step_ms(4, prefill_ms=6.0) == pytest.approx(18.0)

    def test_batching_speedup(self):
        """Saturated tokens/s at batch B over batch 1 is B(a+b)/(a+Bb)."""
        llm = _llm()
        a, b = llm.decode_a_ms, llm.decode_b_ms
        ratio = llm_rate(llm, batch=8) / llm_rate(llm, batch=1)
        assert ratio == pytest.approx(8 * (a + b) / (a + 8 * b))

    def test_prefill_is_amortized_over_output(self):
        llm = _llm(prefill_ms_per_token=0.1)
        plain = llm_rate(llm, batch=8)
        loaded = llm_rate(llm, batch=8, prompt_tokens=100, output_tokens=50)
        # 8 / 50 joiners per step, 10 ms of prefill each
        assert loaded == pytest.approx(1000.0 * 8 / (14.0 + 8 / 50 * 10.0))
        assert loaded < plain

    def test_inline_encoding_costs_the_llm(self, profiles):
        thinker = profiles["qwen25-omni-thinker"]
        assert thinker.inline_encode_ms(0) == 0.0
        assert thinker.inline_encode_ms(2) == pytest.approx(55.0)
        fissioned = llm_rate(thinker, prompt_tokens=200, output_tokens=100)
        inline = llm_rate(thinker, prompt_tokens=200, output_tokens=100, items=1.0)
        assert inline < fissioned

    def test_zero_batch_has_no_rate(self):
        assert llm_rate(_llm(), batch=0) == 0.0

    def test_generator_rate(self, profiles):
        generator = profiles["qwen25-omni-generator"]
        assert generator_rate(generator) == pytest.approx(1000.0 * 25 / 30.0)

    def test_effective_batch_is_memory_bound(self):
        llm = _llm(activation_bytes_per_request=1_000_000_000, max_batch=64)
        assert llm.effective_batch() == 64
        assert llm.effective_batch(free_bytes_per_gpu=10_500_000_000) == 10
        assert llm.effective_batch(free_bytes_per_gpu=10_500_000_000, tp=2) == 21
        assert llm.effective_batch(free_bytes_per_gpu=500_000_000) == 0

    def test_to_dict_reloads(self, profiles):
        for name, profile in profiles.items():
            assert profile_from_dict(name, profile.to_dict()) == profile


# ---------------------------------------------------------------------------
# Shape rules and catalog
# ---------------------------------------------------------------------------


class TestCatalog:

    @pytest.mark.parametrize("case", SHAPES, ids=[f"{c['model_id']}-{c['modality']}" for c in SHAPES])
    def test_embedding_shapes(self, catalog, case):
        spec = UnitTaskSpec.encoder([case["model_id"]], case["modality"])
        item = MediaItem(case["modality"], case["width"], case["height"], case["seconds"])
        assert embedding_shape(item, catalog.shape_rule(spec)) == case["shape"]

    def test_exact_match_wins(self, catalog):
        spec = UnitTaskSpec(TaskClass.LLM, "Qwen/Qwen3-Omni-30B-A3B", extra_config={"role": "thinker"})
        descriptor = catalog.descriptor_for(spec)
        assert descriptor.profile_ref == "qwen3-omni-thinker"
        assert descriptor.allowed_tp_degrees == frozenset({2, 4})
        assert descriptor.weight_bytes == 100_000_000_000

    def test_role_must_match(self, catalog):
        talker = UnitTaskSpec(TaskClass.LLM, "Qwen/Qwen2.5-Omni-7B", extra_config={"role": "talker"})
        assert catalog.lookup(talker).profile_ref == "qwen25-omni-talker"

    def test_wildcard_fallback(self, catalog, caplog):
        spec = UnitTaskSpec(TaskClass.GENERATOR, "acme/tts", modality=Modality.AUDIO)
        with caplog.at_level("WARNING", logger="FissionServe"):
            entry = catalog.lookup(spec)
        assert entry.profile_ref == "default-generator"
        assert "acme/tts" in caplog.text

    def test_no_entry(self):
        with pytest.raises(TaskValidationError, match="no catalog entry"):
            ModelCatalog([]).lookup(UnitTaskSpec(TaskClass.LLM, "m"))

    def test_monolith_lists_components(self, catalog, profiles):
        spec = UnitTaskSpec(
            TaskClass.LLM, "Qwen/Qwen2.5-Omni-7B", extra_config={"role": "monolith", "audio_output": True}
        )
        descriptor = catalog.descriptor_for(spec)
        assert len(descriptor.activation_profiles) == 4
        assert all(name in profiles for name in descriptor.activation_profiles)

    def test_every_catalog_profile_is_shipped(self, catalog, profiles):
        for entry in catalog.entries:
            assert entry.profile_ref in profiles, entry.profile_ref

    def test_bad_catalog(self, tmp_path):
        path = tmp_path / "catalog.json"
        path.write_text(json.dumps({"models": [{"task_class": "Encoder"}]}))
        with pytest.raises(ProfileError, match="bad catalog entry"):
            ModelCatalog.load(path)
