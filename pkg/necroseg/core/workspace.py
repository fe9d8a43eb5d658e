from dataclasses import dataclass
from pathlib import Path

import yaml

from necroseg.core import PathLike, logger
from necroseg.core.ledger import RunLedger
from necroseg.exceptions import ConfigError, MissingArtifactError

WSI_GROUPS = ("source", "train", "eval")


@dataclass
class Workspace:
    """File layout of one experiment directory"""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def create(self) -> "Workspace":
        dirs = [self.data, self.checkpoints, self.coarse_cache, self.inference, self.figures]
        dirs += [self.wsi_dir(group) for group in WSI_GROUPS]
        try:
            for d in dirs:
                d.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"Workspace {self.root} is not writable: {e}")
        return self

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def ledger(self) -> Path:
        return self.root / "ledger.jsonl"

    @property
    def data(self) -> Path:
        return self.root / "data"

    def wsi_dir(self, group: str) -> Path:
        return self.data / "wsi" / group

    def dataset_dir(self, name: str) -> Path:
        """``source``, ``patches`` or ``regions``"""
        return self.data / name

    def manifest(self, name: str, split: str) -> Path:
        return self.dataset_dir(name) / f"{split}.json"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def classifier_base(self) -> Path:
        return self.checkpoints / "classifier_base.bin"

    @property
    def classifier_lora(self) -> Path:
        return self.checkpoints / "classifier_lora.bin"

    @property
    def refiner(self) -> Path:
        return self.checkpoints / "refiner.bin"

    @property
    def coarse_cache(self) -> Path:
        return self.root / "cache" / "coarse"

    @property
    def inference(self) -> Path:
        return self.root / "inference"

    def prediction(self, wsi_id: str, stage: str) -> Path:
        """``coarse`` or ``refined`` raster of a slide"""
        return self.inference / f"{wsi_id}_{stage}.png"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def seed_run(self, seed: int) -> Path:
        """Workspace of one seed of a benchmark"""
        return self.root / "seeds" / f"seed_{seed}"

    @property
    def figures(self) -> Path:
        return self.reports / "figures"


def require(path: PathLike, hint: str) -> Path:
    """Path of a prerequisite artifact, or MissingArtifactError naming the command that makes it"""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} not found, run `necroseg {hint}` first")
    return path


def open_run(config, stage: str):
    """Workspace and ledger of a command, with the resolved config snapshot recorded

    Returns:
        Tuple[Workspace, RunLedger]
    """
    workspace = Workspace(config.workspace).create()
    with open(workspace.config, "w") as fw:
        yaml.safe_dump(config.to_dict(), fw, sort_keys=False)
    ledger = RunLedger(workspace.ledger)
    ledger.log_config(config.to_dict())
    ledger.log_artifact(workspace.config, "config")
    logger.info(f"{stage}: workspace {workspace.root}")
    return workspace, ledger
