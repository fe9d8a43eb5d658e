from enum import IntEnum
from importlib.resources import files as get_module_dir
from json import load
from typing import Union
from pathlib import Path
import hashlib
import logging
import random

import colorlog
import numpy as np
import torch


logging.basicConfig(level=logging.INFO)

handler = colorlog.StreamHandler()
handler.setFormatter(
    colorlog.ColoredFormatter("%(log_color)s%(name)s [%(levelname)s]: %(message)s")
)

logger = colorlog.getLogger("necroseg")
logger.addHandler(handler)
logger.propagate = False


class ClassId(IntEnum):
    """Tissue classes of the segmentation task, in report order"""

    BG = 0  # viable background
    VT = 1  # viable tumor
    NC = 2  # necrosis
    FH = 3  # fibrosis / hyalination
    HC = 4  # hemorrhage / cystic change
    IF = 5  # inflammatory
    NT = 6  # non-tumor tissue


CLASS_NAMES = tuple(c.name for c in ClassId)
N_CLASSES = len(CLASS_NAMES)

# Patch-level class proportions of the osteosarcoma patch dataset.
REFERENCE_CLASS_FREQS = (0.0286, 0.1790, 0.1484, 0.1997, 0.0113, 0.0032, 0.4298)

PathLike = Union[str, Path]


def get_asset_path(name: str) -> Path:
    """Path to a file shipped in necroseg.assets"""
    return Path(str(get_module_dir("necroseg.assets").joinpath(name)))


def get_schema(name: str) -> dict:
    with open(get_asset_path(name), "r") as f:
        return load(f)


def reference_class_freqs() -> np.ndarray:
    """Reference frequencies renormalised so they sum to one exactly"""
    freqs = np.asarray(REFERENCE_CLASS_FREQS, dtype=np.float64)
    return freqs / freqs.sum()


def sha256_file(path: PathLike, chunk_size: int = 1 << 20) -> str:
    """Content hash of a file

    Args:
        path(PathLike): file to hash
    Returns:
        str: hex digest
    """
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_bytes(*chunks: bytes) -> str:
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from integer parts"""
    data = ",".join(str(int(p)) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little") >> 1


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def set_verbosity(verbose: bool) -> None:
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
