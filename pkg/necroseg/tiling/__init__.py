"""Slide geometry: regions, patches, coarse masks and the final merge"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from necroseg.core import ClassId, N_CLASSES
from necroseg.exceptions import (
    EmptyPatchError,
    GeometryError,
    ShapeMismatchError,
    SimplexError,
)

SIMPLEX_TOL = 1e-6
WHITE = 255


class MaskKind(str, Enum):
    ONE_HOT = "one-hot"
    COARSE = "coarse"
    DIFFUSION_STATE = "diffusion-state"
    REFINED = "refined"


@dataclass
class ProbMask:
    """Per-pixel class-probability stack of shape (C, h, w)

    One-hot, coarse and refined masks lie on the probability simplex at every
    pixel; diffusion states are unconstrained real fields.
    """

    values: np.ndarray
    kind: MaskKind = MaskKind.COARSE

    def __post_init__(self):
        self.kind = MaskKind(self.kind)
        if self.values.ndim != 3 or self.values.shape[0] != N_CLASSES:
            raise ShapeMismatchError(
                f"ProbMask expects shape ({N_CLASSES}, h, w), got {self.values.shape}"
            )
        if self.kind != MaskKind.DIFFUSION_STATE:
            check_simplex(self.values, axis=0)

    @classmethod
    def one_hot(cls, labels: np.ndarray, dtype=np.float32) -> "ProbMask":
        """One-hot mask of a class-index raster"""
        values = np.eye(N_CLASSES, dtype=dtype)[labels.astype(np.intp)]
        return cls(np.ascontiguousarray(np.moveaxis(values, -1, 0)), MaskKind.ONE_HOT)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    def argmax(self) -> np.ndarray:
        """Class-index raster; ties go to the lowest ClassId"""
        return np.argmax(self.values, axis=0).astype(np.uint8)


@dataclass
class RegionGrid:
    wsi_shape: Tuple[int, int]
    region_shape: Tuple[int, int]
    pad: Tuple[int, int]
    coords: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def n_regions(self) -> int:
        return len(self.coords)

    @property
    def padded_shape(self) -> Tuple[int, int]:
        return (self.wsi_shape[0] + self.pad[0], self.wsi_shape[1] + self.pad[1])

    @property
    def grid_shape(self) -> Tuple[int, int]:
        ph, pw = self.padded_shape
        return (ph // self.region_shape[0], pw // self.region_shape[1])


@dataclass
class PatchGrid:
    region_shape: Tuple[int, int]
    patch_shape: Tuple[int, int]
    coords: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def n_patches(self) -> int:
        return len(self.coords)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (
            self.region_shape[0] // self.patch_shape[0],
            self.region_shape[1] // self.patch_shape[1],
        )


def check_simplex(values: np.ndarray, axis: int = -1, tol: float = SIMPLEX_TOL) -> None:
    """Raise SimplexError unless every vector along axis is a distribution"""
    if not np.all(np.isfinite(values)):
        raise SimplexError("Probability vectors contain non-finite values")
    if np.any(values < -tol):
        raise SimplexError(f"Probability vectors contain negative entries (min {values.min():.3g})")
    sums = values.sum(axis=axis, dtype=np.float64)
    worst = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
    if worst > tol:
        raise SimplexError(f"Probability vectors do not sum to 1 (max deviation {worst:.3g})")


def _as_shape(size) -> Tuple[int, int]:
    if isinstance(size, int):
        return (size, size)
    return (int(size[0]), int(size[1]))


def pad_to_multiple(image: np.ndarray, shape: Tuple[int, int], fill=None) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Pad bottom/right so both dims are multiples of shape

    RGB rasters are padded white, label rasters with BG.
    """
    if fill is None:
        fill = WHITE if image.ndim == 3 else int(ClassId.BG)
    h, w = image.shape[:2]
    pad_h = (-h) % shape[0]
    pad_w = (-w) % shape[1]
    if pad_h == 0 and pad_w == 0:
        return image, (0, 0)
    widths = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, widths, mode="constant", constant_values=fill), (pad_h, pad_w)


def split_into_regions(image: np.ndarray, region_shape=(128, 128), fill=None) -> Tuple[RegionGrid, List[np.ndarray]]:
    """Split a slide raster into regions of region_shape in row-major order

    Args:
        image (np.ndarray): H×W×3 RGB or H×W label raster
        region_shape: (h, w) of a region
        fill: padding value, white for RGB and BG for labels by default
    Returns:
        Tuple[RegionGrid, List[np.ndarray]]: grid geometry and region crops
    """
    region_shape = _as_shape(region_shape)
    if image.size == 0:
        raise GeometryError("Cannot split an empty image")
    padded, pad = pad_to_multiple(image, region_shape, fill)
    rh, rw = region_shape
    coords = [
        (r, c)
        for r in range(0, padded.shape[0], rh)
        for c in range(0, padded.shape[1], rw)
    ]
    grid = RegionGrid(
        wsi_shape=(image.shape[0], image.shape[1]),
        region_shape=region_shape,
        pad=pad,
        coords=coords,
    )
    crops = [padded[r:r + rh, c:c + rw] for r, c in coords]
    return grid, crops


def reassemble_regions(crops: Sequence[np.ndarray], grid: RegionGrid) -> np.ndarray:
    """Inverse of split_into_regions, padding stripped"""
    if len(crops) != grid.n_regions:
        raise ShapeMismatchError(f"Expected {grid.n_regions} regions, got {len(crops)}")
    ph, pw = grid.padded_shape
    out = np.empty((ph, pw) + crops[0].shape[2:], dtype=crops[0].dtype)
    rh, rw = grid.region_shape
    for (r, c), crop in zip(grid.coords, crops):
        out[r:r + rh, c:c + rw] = crop
    return out[: grid.wsi_shape[0], : grid.wsi_shape[1]]


def split_into_patches(region: np.ndarray, patch_shape=(16, 16)) -> Tuple[PatchGrid, List[np.ndarray]]:
    """Split a region into non-overlapping patches in row-major order"""
    patch_shape = _as_shape(patch_shape)
    h, w = region.shape[:2]
    ph, pw = patch_shape
    if h == 0 or w == 0 or h % ph or w % pw:
        raise GeometryError(f"Region of shape {(h, w)} is not divisible into {patch_shape} patches")
    coords = [(r, c) for r in range(0, h, ph) for c in range(0, w, pw)]
    grid = PatchGrid(region_shape=(h, w), patch_shape=patch_shape, coords=coords)
    return grid, [region[r:r + ph, c:c + pw] for r, c in coords]


def reassemble_patches(patches: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    if len(patches) != grid.n_patches:
        raise ShapeMismatchError(f"Expected {grid.n_patches} patches, got {len(patches)}")
    out = np.empty(grid.region_shape + patches[0].shape[2:], dtype=patches[0].dtype)
    ph, pw = grid.patch_shape
    for (r, c), patch in zip(grid.coords, patches):
        out[r:r + ph, c:c + pw] = patch
    return out


def class_counts(labels: np.ndarray) -> np.ndarray:
    """Pixel count per ClassId"""
    flat = np.asarray(labels).ravel().astype(np.intp)
    if flat.size and (flat.min() < 0 or flat.max() >= N_CLASSES):
        raise ShapeMismatchError(f"Label values must lie in 0..{N_CLASSES - 1}")
    return np.bincount(flat, minlength=N_CLASSES)


def dominant_class(label_patch: np.ndarray) -> ClassId:
    """Most frequent class of a label patch, ties broken by the lowest ClassId"""
    if np.asarray(label_patch).size == 0:
        raise EmptyPatchError("Cannot take the dominant class of an empty patch")
    return ClassId(int(np.argmax(class_counts(label_patch))))


def assemble_coarse_mask(patch_probs, grid: PatchGrid) -> ProbMask:
    """Broadcast per-patch class distributions over their footprints

    Args:
        patch_probs: K class-probability vectors, in grid order
        grid (PatchGrid): geometry of the region
    Returns:
        ProbMask: coarse mask of shape (C, h, w)
    """
    probs = np.asarray(patch_probs, dtype=np.float32)
    if probs.ndim != 2 or probs.shape[0] != grid.n_patches or probs.shape[1] != N_CLASSES:
        raise ShapeMismatchError(
            f"Expected {grid.n_patches} vectors of length {N_CLASSES}, got array of shape {probs.shape}"
        )
    check_simplex(probs, axis=1)
    gh, gw = grid.grid_shape
    ph, pw = grid.patch_shape
    values = probs.T.reshape(N_CLASSES, gh, gw)
    values = np.repeat(np.repeat(values, ph, axis=1), pw, axis=2)
    return ProbMask(np.ascontiguousarray(values), MaskKind.COARSE)


def merge_regions(refined: Sequence[ProbMask], grid: RegionGrid) -> np.ndarray:
    """Argmax of every region mask placed at its origin, padding stripped

    Returns:
        np.ndarray: H×W class-index raster
    """
    if len(refined) != grid.n_regions:
        raise ShapeMismatchError(f"Expected {grid.n_regions} region masks, got {len(refined)}")
    return reassemble_regions([mask.argmax() for mask in refined], grid)
