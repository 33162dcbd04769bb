"""Pytest configuration and fixtures for PET joint diffusion tests."""

import tempfile
from pathlib import Path
from typing import Generator

import numpy as np
import pytest

from src.config import ExperimentConfig, Settings, reset_settings
from src.services.models import DatasetManifest
from src.services.phantom import build_dataset
from src.services.volume import LabelVolume, Volume3D

TINY_CONFIG = {
    "phantom": {
        "dims": [16, 16, 16],
        "voxel_mm": [2.0, 2.0, 2.0],
        "organs": ["liver", "lung"],
        "lesion_count": [1, 1],
        "lesion_radius_mm": [3.0, 4.0],
        "fractions": [0.1, 0.25],
        "n_test": 1,
    },
    "patching": {"patch_size": [8, 8, 8], "stride": [4, 4, 4]},
    "diffusion": {"T": 4},
    "network": {
        "base_channels": 4,
        "denoiser_levels": 2,
        "time_embed_dim": 8,
        "segmenter_stages": 2,
        "decoder_levels": 2,
        "ssm_state_dim": 2,
        "ssm_chunk": 16,
        "revision_channels": 4,
    },
    "training": {"e_max": 2, "steps_per_epoch": 2, "batch_size": 2},
    "seed": 7,
}


@pytest.fixture(autouse=True)
def reset_global_state():
    """Reset all global state between tests."""
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def test_settings(temp_dir: Path) -> Settings:
    """Create test settings with temporary directories."""
    return Settings(data_dir=temp_dir / "data", runs_dir=temp_dir / "runs", inference_batch=2)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Smallest config that still exercises every network level."""
    return ExperimentConfig.model_validate(TINY_CONFIG)


@pytest.fixture
def tiny_config_path(temp_dir: Path, tiny_config: ExperimentConfig) -> Path:
    """The tiny config written as an experiment JSON file."""
    path = temp_dir / "experiment.json"
    path.write_text(tiny_config.to_json(), encoding="utf-8")
    return path


@pytest.fixture
def tiny_dataset(temp_dir: Path, tiny_config: ExperimentConfig) -> tuple[Path, DatasetManifest]:
    """Three 16^3 phantoms: two training cases and one test case."""
    data_dir = temp_dir / "data"
    manifest = build_dataset(tiny_config.phantom, tiny_config.seed, 3, data_dir)
    return data_dir, manifest


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_volume(rng: np.random.Generator) -> Volume3D:
    """Random 6x5x4 SUV volume."""
    return Volume3D((6, 5, 4), (2.0, 2.0, 2.0), rng.uniform(0.0, 10.0, size=(4, 5, 6)))


@pytest.fixture
def small_labels(rng: np.random.Generator) -> LabelVolume:
    """Random 6x5x4 labels over 4 classes."""
    return LabelVolume((6, 5, 4), (2.0, 2.0, 2.0), rng.integers(0, 4, size=(4, 5, 6)), num_classes=4)
