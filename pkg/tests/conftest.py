import os

# Set test environment before settings are read
os.environ["TCC_TESTING"] = "True"

import numpy as np
import pytest
import pytest_asyncio
from typing import AsyncGenerator
from httpx import AsyncClient

from app.models.config import BackboneSpec, FusionSpec, RunConfig, SceneSpec, TccConfig, TrainConfig
from app.services.synth_data import benchmark_scenes


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for random test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_tcc() -> TccConfig:
    """Reduced TCC config for fast per-level checks."""
    return TccConfig(n_keys=3, base_channels=4, stack_depth=2)


@pytest.fixture
def desk_backbone() -> BackboneSpec:
    return BackboneSpec(stem_channels=8, stage_channels=(8, 16, 16, 16), width=32)


def make_run_config(refinement: str = "tcc", mode: str = "full", **train) -> RunConfig:
    """Small desk-scale run config (width 32, 8 scenes); ``mode`` selects the TCC ablation."""
    return RunConfig(
        backbone=BackboneSpec(stem_channels=8, stage_channels=(8, 16, 16, 16), width=32),
        fusion=FusionSpec(refinement=refinement),
        tcc=TccConfig(base_channels=4, mode=mode),
        train=TrainConfig(**{"steps": 2, "batch_size": 2, "num_scenes": 8, "eval_interval": 1, "head_channels": 8, **train}),
        scenes=SceneSpec(),
    )


@pytest.fixture
def run_config():
    """Factory for desk-scale run configs: ``run_config("none", steps=3)``."""
    return make_run_config


@pytest.fixture
def desk_config() -> RunConfig:
    return make_run_config()


@pytest.fixture
def scenes(desk_config: RunConfig):
    return benchmark_scenes(desk_config.scenes, desk_config.train.num_scenes)


@pytest.fixture
def output_dir(tmp_path):
    """Per-test artifact directory."""
    out = tmp_path / "artifacts"
    out.mkdir()
    return out


@pytest_asyncio.fixture
async def client() -> AsyncGenerator[AsyncClient, None]:
    """Create a test client for the app."""
    from app.main import app

    async with AsyncClient(app=app, base_url="http://test") as client:
        yield client
