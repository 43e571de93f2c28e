"""
Shared fixtures
"""
from pathlib import Path

import pytest

from models.schema import CameraConfig, MappingConfig
from services.world import Scene, load_scene

SCENES_DIR = Path(__file__).resolve().parents[1] / "data" / "scenes"
CONFIGS_DIR = Path(__file__).resolve().parents[1] / "data" / "configs"


@pytest.fixture
def single_room() -> Scene:
    return load_scene(SCENES_DIR / "single_room.json")


@pytest.fixture
def two_rooms() -> Scene:
    return load_scene(SCENES_DIR / "two_rooms.json")


@pytest.fixture
def four_rooms() -> Scene:
    return load_scene(SCENES_DIR / "four_rooms.json")


@pytest.fixture
def small_camera() -> CameraConfig:
    """Low-resolution camera for fast mapping tests"""
    return CameraConfig(width=48, height=36, focal=24.0)


@pytest.fixture
def fast_mapping() -> MappingConfig:
    return MappingConfig(rays_per_step=256, samples_per_ray=16, grad_steps_per_frame=5, optimizer="adam")
