import pytest

from necroseg.configuration.configuration import (
    ExperimentConfig,
    GeneratorConfig,
    default_config,
    dump_config,
    load_config,
    validate_mapping,
)
from necroseg.exceptions import ConfigError
from necroseg.synthgen import SOURCE_TEXTURE, TARGET_TEXTURE


def test_default_config():
    config = default_config()
    assert config.seed == 0
    assert config.geometry.patch == 16
    assert config.geometry.region == 128
    assert config.geometry.k == 3
    assert config.refiner.T == 200
    assert config.refiner.lam == 1.0
    assert config.classifier.vit.image_size == config.geometry.patch
    assert config.generator.source_texture.palette_shift == (14.0, -12.0, 10.0)
    assert config.generator.source_texture == SOURCE_TEXTURE
    assert config.generator.texture == TARGET_TEXTURE == GeneratorConfig().texture
    assert config.evaluation.policy == "present"


def test_user_config_overrides_defaults(test_data_dir):
    config = load_config(test_data_dir / "tiny_config.yaml")
    assert config.seed == 5
    assert config.geometry.region == 16
    assert config.geometry.k == 1
    assert config.refiner.T == 10
    # untouched keys keep their defaults
    assert config.refiner.s == 1.0
    assert config.generator.texture.speckle_std == 14.0
    assert config.classifier.vit.mlp_ratio == 2


def test_dump_and_load(tmp_path, tiny_config):
    path = dump_config(tiny_config, tmp_path / "config.yaml")
    assert load_config(path) == tiny_config
    assert ExperimentConfig.from_dict(tiny_config.to_dict()) == tiny_config


def test_unknown_key(test_data_dir):
    with pytest.raises(ConfigError, match="temperature"):
        load_config(test_data_dir / "unknown_key.yaml")


def test_inconsistent_geometry(test_data_dir):
    with pytest.raises(ConfigError):
        load_config(test_data_dir / "bad_geometry.yaml")


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(listing)


def test_schema_types():
    with pytest.raises(ConfigError):
        validate_mapping({"refiner": {"T": "many"}})
    with pytest.raises(ConfigError):
        validate_mapping({"evaluation": {"policy": "some"}})
    validate_mapping({"refiner": {"T": 50}})


def test_update():
    config = default_config().update({"seed": 3, "paths.workspace": "runs/a", "threads": None})
    assert config.seed == 3
    assert str(config.workspace) == "runs/a"
    assert config.threads == 1
    with pytest.raises(ConfigError):
        default_config().update({"refiner.temperature": 2})
    with pytest.raises(ConfigError):
        default_config().update({"refiner": {}})
    with pytest.raises(ConfigError):
        default_config().update({"generator.texture.cell_size": 8})
    with pytest.raises(ConfigError):
        default_config().update({"refiner.n_steps": 500})
    with pytest.raises(ConfigError):
        default_config().update({"classifier.vit.image_size": 8})
    with pytest.raises(ConfigError, match="smaller than 4 regions"):
        default_config().update({"geometry.wsi_height": 256})
