"""Tests for fissionserve.utils_registry — AppRegistry insert / remove / find / persistence."""

import json
import pytest

from fissionserve.utils_errors import DuplicateAppError, NotFoundError
from fissionserve.utils_registry import AppRegistry


# ---------------------------------------------------------------------------
# AppRegistry — insert / has_app / get / remove
# ---------------------------------------------------------------------------


class TestAppRegistryInsert:

    def test_insert_and_has_app(self, tmp_registry, gemma_chat):
        tmp_registry.insert(gemma_chat)
        assert tmp_registry.has_app("gemma-chat")
        assert not tmp_registry.has_app("gemma-arena")
        assert tmp_registry.app_ids() == ["gemma-chat"]

    def test_duplicate_is_rejected(self, tmp_registry, gemma_chat):
        tmp_registry.insert(gemma_chat)
        with pytest.raises(DuplicateAppError, match="gemma-chat"):
            tmp_registry.insert(gemma_chat)

    def test_get_returns_an_equal_manifest(self, tmp_registry, gemma_arena):
        tmp_registry.insert(gemma_arena)
        again = tmp_registry.get("gemma-arena")
        assert again.to_dict() == gemma_arena.to_dict()

    def test_find_returns_copies(self, tmp_registry, gemma_chat):
        """Mutating a found record must not change the registry."""
        tmp_registry.insert(gemma_chat)
        tmp_registry.find()[0]["app_id"] = "MUTATED"
        assert tmp_registry.app_ids() == ["gemma-chat"]

    def test_find_by_registration_time(self, tmp_registry, gemma_chat):
        tmp_registry.insert(gemma_chat)
        assert len(tmp_registry.find(registered_gte="2000-01-01T00:00:00Z")) == 1
        assert tmp_registry.find(registered_gte="2999-01-01T00:00:00Z") == []


class TestAppRegistryRemove:

    def test_remove(self, tmp_registry, gemma_chat, gemma_arena):
        tmp_registry.insert(gemma_chat)
        tmp_registry.insert(gemma_arena)
        assert tmp_registry.remove("gemma-chat")
        assert tmp_registry.app_ids() == ["gemma-arena"]

    def test_remove_unknown(self, tmp_registry):
        with pytest.raises(NotFoundError):
            tmp_registry.remove("nope")

    def test_get_unknown(self, tmp_registry):
        with pytest.raises(NotFoundError):
            tmp_registry.get("nope")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


class TestAppRegistryPersistence:

    def test_reload_keeps_order(self, tmp_path, gemma_chat, gemma_arena):
        path = tmp_path / "state" / "apps.json"
        registry = AppRegistry(str(path))
        registry.insert(gemma_arena)
        registry.insert(gemma_chat)
        reloaded = AppRegistry(str(path))
        assert [m.app_id for m in reloaded.manifests()] == ["gemma-arena", "gemma-chat"]

    def test_file_is_plain_json(self, tmp_path, gemma_chat):
        path = tmp_path / "apps.json"
        AppRegistry(str(path)).insert(gemma_chat)
        data = json.loads(path.read_text())
        assert data[0]["app_id"] == "gemma-chat"
        assert data[0]["registered"].endswith("Z")
        assert data[0]["manifest"]["serve_entry"] == "mllm_chat"

    def test_in_memory_registry_writes_nothing(self, tmp_path, gemma_chat):
        registry = AppRegistry()
        registry.insert(gemma_chat)
        assert registry.has_app("gemma-chat")
        assert list(tmp_path.iterdir()) == []
