from pathlib import Path

import pytest

from necroseg.configuration.configuration import load_config
from necroseg.core import reference_class_freqs
from necroseg.synthgen import generate_wsi


@pytest.fixture(scope="session")
def test_data_dir() -> Path:
    """Path to test data directory"""
    return Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def small_wsi():
    """A 64×96 target-family slide"""
    return generate_wsi(3, 64, 96, reference_class_freqs(), wsi_id="small")


@pytest.fixture
def tiny_config(test_data_dir, tmp_path):
    """Experiment small enough to run every pipeline stage in seconds"""
    config = load_config(test_data_dir / "tiny_config.yaml")
    return config.update({"paths.workspace": str(tmp_path / "workspace")})
