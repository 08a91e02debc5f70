import os
import json
import pytest

from fissionserve.utils_clock import SimClock
from fissionserve.utils_config import ClusterConfig, NodeConfig
from fissionserve.utils_control import ControlPlane
from fissionserve.utils_profiles import GB, ModelCatalog, load_profiles
from fissionserve.utils_registry import AppRegistry
from fissionserve.utils_tasks import AppManifest, ChatRequest, MediaItem

# Root of the project
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PROFILES_DIR = os.path.join(PROJECT_ROOT, "profiles")
APPS_DIR = os.path.join(PROJECT_ROOT, "apps")
MIXES_DIR = os.path.join(PROJECT_ROOT, "mixes")
FIXTURES_DIR = os.path.join(PROJECT_ROOT, "tests", "fixtures")

PROFILE_FILES = [
    os.path.join(PROFILES_DIR, "qwen3-omni.json"),
    os.path.join(PROFILES_DIR, "qwen25-omni.json"),
    os.path.join(PROFILES_DIR, "mllm.json"),
    os.path.join(PROFILES_DIR, "imagegen.json"),
]


def load_fixture(name):
    with open(os.path.join(FIXTURES_DIR, name)) as f:
        return json.load(f)


def load_manifest(name):
    with open(os.path.join(APPS_DIR, f"{name}.json")) as f:
        return AppManifest.from_json(f.read())


@pytest.fixture(scope="session")
def profiles():
    """Every calibrated component profile shipped in profiles/."""
    return load_profiles(PROFILE_FILES)


@pytest.fixture(scope="session")
def catalog():
    return ModelCatalog.load(os.path.join(PROFILES_DIR, "catalog.json"))


@pytest.fixture
def clock():
    """A fresh Virtual clock nobody drives."""
    return SimClock()


@pytest.fixture
def tmp_registry(tmp_path):
    """A fresh AppRegistry persisted in a temporary directory."""
    return AppRegistry(str(tmp_path / "apps.json"))


def small_config(gpus=4, nodes=1, gpu_gb=80, **overrides):
    per_node = gpus // nodes
    config = ClusterConfig(
        nodes=[NodeConfig(f"node{i}", per_node, int(gpu_gb * GB)) for i in range(nodes)],
        profiles=list(PROFILE_FILES),
        catalog=os.path.join(PROFILES_DIR, "catalog.json"),
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    return config.validate()


@pytest.fixture
def make_control(profiles, catalog):
    """Factory for undriven in-process control planes; shut down after the test."""
    created = []

    def make(gpus=4, nodes=1, registry=None, **overrides):
        config = small_config(gpus, nodes, **overrides)
        control = ControlPlane(
            config,
            profiles=profiles,
            catalog=catalog,
            clock=SimClock(),
            registry=registry if registry is not None else AppRegistry(),
        )
        created.append(control)
        return control.start(drive=False, restore=registry is not None)

    yield make
    for control in created:
        control.shutdown()


@pytest.fixture
def gemma_chat():
    return load_manifest("mllm")


@pytest.fixture
def gemma_arena():
    return load_manifest("gemma-arena")


@pytest.fixture
def qwen25_omni():
    return load_manifest("qwen25-omni")


@pytest.fixture
def imagegen():
    return load_manifest("imagegen")


@pytest.fixture
def image_request():
    """A realistic single-image chat request."""
    return ChatRequest(
        request_id="req-image",
        prompt_tokens=24,
        output_tokens=20,
        items=[MediaItem("Image", width=896, height=672)],
    )


@pytest.fixture
def spoken_request():
    """Text in, text plus speech out."""
    return ChatRequest(
        request_id="req-spoken",
        prompt_tokens=40,
        output_tokens=16,
        audio_output=True,
        audio_tokens=60,
    )
