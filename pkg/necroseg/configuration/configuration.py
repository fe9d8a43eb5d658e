"""Experiment configuration: YAML file, validated, resolved into dataclasses"""
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from jsonschema import Draft7Validator

from necroseg.classifier.vit import TinyVitConfig
from necroseg.core import PathLike, get_asset_path, get_schema, logger
from necroseg.exceptions import ConfigError, Error
from necroseg.refiner import RefinerConfig
from necroseg.synthgen import (
    SOURCE_TEXTURE,
    TARGET_TEXTURE,
    TextureConfig,
    check_class_freqs,
    check_region_size,
    check_wsi_size,
    split_counts,
)


@dataclass
class GeometryConfig:
    wsi_height: int = 512
    wsi_width: int = 512
    patch: int = 16
    region: int = 128

    @property
    def k(self) -> int:
        """Region side in patches is 2**k"""
        return check_region_size(self.region, self.patch)


@dataclass
class GeneratorConfig:
    class_freqs: list = field(default_factory=lambda: [0.0286, 0.1790, 0.1484, 0.1997, 0.0113, 0.0032, 0.4298])
    n_source: int = 4
    n_train: int = 6
    n_eval: int = 2
    splits: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    texture: TextureConfig = TARGET_TEXTURE
    source_texture: TextureConfig = SOURCE_TEXTURE


@dataclass
class ClassifierConfig:
    vit: TinyVitConfig = field(default_factory=TinyVitConfig)
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    rank: int = 4
    lr: float = 1e-2
    epochs: int = 5
    batch_size: int = 64


@dataclass
class EvaluationConfig:
    policy: str = "present"
    figures: bool = True
    save_probs: bool = False


@dataclass
class PathsConfig:
    workspace: str = "workspace"


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    def update(self, updates: Dict[str, Any]) -> "ExperimentConfig":
        """Set values by dotted key, e.g. ``{"paths.workspace": "runs/a"}``

        None values are skipped so unset CLI flags can be passed through.
        """
        for key, value in updates.items():
            if value is None:
                continue
            target = self
            *parents, leaf = key.split(".")
            for part in parents:
                if not is_dataclass(target) or not hasattr(target, part):
                    raise ConfigError(f"Setting '{key}' not found")
                target = getattr(target, part)
            if not is_dataclass(target) or leaf not in {f.name for f in fields(target)}:
                raise ConfigError(f"Setting '{key}' not found")
            if is_dataclass(getattr(target, leaf)):
                raise ConfigError(f"Setting '{key}' is a section, set one of its keys instead")
            try:
                setattr(target, leaf, value)
            except AttributeError as e:
                raise ConfigError(f"Setting '{key}' cannot be changed: {e}")
        return check_config(self)

    @property
    def workspace(self) -> Path:
        return Path(self.paths.workspace)


def _plain(value):
    """Tuples to lists, recursively, so the mapping is YAML- and JSON-friendly"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, d: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        value = d[f.name]
        default = f.default_factory() if callable(f.default_factory) else f.default
        if is_dataclass(default):
            value = _build(type(default), value)
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def validate_mapping(mapping: dict, source: str = "config") -> None:
    """Check a raw configuration mapping against the bundled JSON schema"""
    validator = Draft7Validator(get_schema("config_schema.json"))
    errors = sorted(validator.iter_errors(mapping), key=lambda e: list(e.path))
    if errors:
        lines = [
            f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors
        ]
        raise ConfigError(f"Invalid configuration {source}:\n  " + "\n  ".join(lines))


def check_config(config: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks the schema cannot express"""
    try:
        check_region_size(config.geometry.region, config.geometry.patch)
        check_wsi_size(config.geometry.wsi_height, config.geometry.wsi_width, config.geometry.region)
        check_class_freqs(config.generator.class_freqs)
        split_counts(0, config.generator.splits)
        config.classifier.vit.validate()
        config.refiner.validate()
    except Error as e:
        raise ConfigError(e.message)
    if config.classifier.vit.image_size != config.geometry.patch:
        raise ConfigError(
            f"classifier.vit.image_size ({config.classifier.vit.image_size}) "
            f"must equal geometry.patch ({config.geometry.patch})"
        )
    if config.refiner.n_steps > config.refiner.T:
        raise ConfigError(f"refiner.n_steps ({config.refiner.n_steps}) exceeds refiner.T ({config.refiner.T})")
    if config.geometry.region % (2 * config.refiner.condition_downsample):
        raise ConfigError(
            f"geometry.region ({config.geometry.region}) must be divisible by "
            f"2 * refiner.condition_downsample"
        )
    return config


def _read_yaml(path: PathLike) -> dict:
    try:
        with open(path, "r") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"Config file {path} not found")
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a mapping at top level")
    return data


def default_config() -> ExperimentConfig:
    return load_config(None)


def load_config(path: Optional[PathLike] = None) -> ExperimentConfig:
    """Read a config file over the bundled defaults

    Args:
        path (PathLike): user YAML file; None gives the defaults
    Returns:
        ExperimentConfig: validated configuration
    Raises:
        ConfigError: unknown keys, wrong types or inconsistent geometry
    """
    mapping = _read_yaml(get_asset_path("default_config.yaml"))
    if path is not None:
        user = _read_yaml(path)
        validate_mapping(user, str(path))
        mapping = _deep_merge(mapping, user)
        logger.debug(f"Loaded configuration from {path}")
    validate_mapping(mapping)
    return check_config(ExperimentConfig.from_dict(mapping))


def dump_config(config: ExperimentConfig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fw:
        yaml.safe_dump(config.to_dict(), fw, sort_keys=False)
    return path

