"""Synthetic whole slide images with seven-class ground truth

A slide is a seeded Voronoi partition whose cells receive tissue classes so that
the realized class areas track a target frequency vector. Each class is rendered
with its own base colour, Gaussian speckle and some colour bleed across class
boundaries, which keeps a patch classifier learnably imperfect.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import json

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

from necroseg.core import (
    CLASS_NAMES,
    N_CLASSES,
    PathLike,
    derive_seed,
    logger,
)
from necroseg.core.tensorio import read_tensors, write_tensors
from necroseg.exceptions import (
    ConfigError,
    EmptyDatasetError,
    GeometryError,
    InvalidFrequencyError,
    MissingArtifactError,
)
from necroseg.tiling import (
    ProbMask,
    class_counts,
    dominant_class,
    pad_to_multiple,
    split_into_regions,
)

SPLITS = ("train", "valid", "test")
FREQ_TOL = 1e-9
NEAR_WHITE = 240
BACKGROUND_TILE_FRACTION = 0.95
# a slide spans at least this many regions along each side
MIN_REGIONS_PER_SIDE = 4

# Base RGB colour per ClassId. NC/FH and VT/IF are deliberately close.
PALETTE = np.array(
    [
        [236, 226, 238],  # BG
        [110, 60, 150],  # VT
        [220, 138, 176],  # NC
        [228, 160, 190],  # FH
        [196, 62, 74],  # HC
        [92, 56, 140],  # IF
        [182, 112, 168],  # NT
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class TextureConfig:
    """Rendering parameters of a synthetic slide

    Attributes:
        cell_size (int): mean Voronoi cell side in pixels
        smooth_radius (int): radius of the majority filter applied to the label map
        speckle_std (float): standard deviation of the per-pixel Gaussian speckle
        bleed_fraction (float): share of near-boundary pixels drawn in the neighbour's colour
        bleed_width (int): distance from a boundary, in pixels, where bleeding happens
        palette_shift (tuple): RGB offset added to every base colour
    """

    cell_size: int = 40
    smooth_radius: int = 3
    speckle_std: float = 14.0
    bleed_fraction: float = 0.10
    bleed_width: int = 4
    palette_shift: Tuple[float, float, float] = (0.0, 0.0, 0.0)


TARGET_TEXTURE = TextureConfig()
# Shifted distribution used to pretrain the frozen base classifier.
SOURCE_TEXTURE = TextureConfig(speckle_std=20.0, palette_shift=(14.0, -12.0, 10.0))


@dataclass
class SyntheticWsi:
    image: np.ndarray
    labels: np.ndarray
    seed: int
    class_freqs: np.ndarray
    realized_freqs: np.ndarray
    texture: TextureConfig = TARGET_TEXTURE
    wsi_id: str = "wsi"

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


@dataclass
class Geometry:
    height: int
    width: int
    region: Tuple[int, int]
    patch: Tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "region": list(self.region),
            "patch": list(self.patch),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(d["height"], d["width"], tuple(d["region"]), tuple(d["patch"]))


@dataclass
class ManifestItem:
    """One record of a dataset manifest

    Patch records carry a class label, region records the path of a one-hot mask.
    ``coords`` index the patch or region grid, ``origin`` is the pixel position of
    the top-left corner in the padded slide.
    """

    path: str
    coords: Tuple[int, int]
    origin: Tuple[int, int]
    source: str
    label: Optional[int] = None
    mask: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "path": self.path,
            "coords": list(self.coords),
            "origin": list(self.origin),
            "source": self.source,
        }
        if self.label is not None:
            d["label"] = int(self.label)
        if self.mask is not None:
            d["mask"] = self.mask
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestItem":
        return cls(
            path=d["path"],
            coords=tuple(d["coords"]),
            origin=tuple(d["origin"]),
            source=d["source"],
            label=d.get("label"),
            mask=d.get("mask"),
        )


@dataclass
class DatasetManifest:
    """Split of a patch or region dataset

    Item paths are relative to ``root``, the directory the manifest is saved in.
    """

    split: str
    kind: str
    geometry: Geometry
    items: List[ManifestItem] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.items)

    def __repr__(self):
        return f"DatasetManifest(kind={self.kind}, split={self.split}, items={len(self.items)})"

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "kind": self.kind,
            "geometry": self.geometry.to_dict(),
            "items": [item.to_dict() for item in self.items],
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        if path.parent.resolve() != Path(self.root).resolve():
            raise GeometryError(f"Manifest must be saved next to its files in {self.root}")
        with open(path, "w") as fw:
            json.dump(self.to_dict(), fw, indent=1, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: PathLike) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"Manifest {path} does not exist")
        with open(path, "r") as fh:
            d = json.load(fh)
        return cls(
            split=d["split"],
            kind=d["kind"],
            geometry=Geometry.from_dict(d["geometry"]),
            items=[ManifestItem.from_dict(i) for i in d["items"]],
            root=path.parent,
        )


def check_class_freqs(class_freqs: Sequence[float]) -> np.ndarray:
    freqs = np.asarray(class_freqs, dtype=np.float64)
    if freqs.shape != (N_CLASSES,):
        raise InvalidFrequencyError(f"Expected {N_CLASSES} class frequencies, got shape {freqs.shape}")
    if not np.all(np.isfinite(freqs)) or np.any(freqs < 0):
        raise InvalidFrequencyError(f"Class frequencies must be finite and non-negative: {freqs}")
    if abs(freqs.sum() - 1.0) > FREQ_TOL:
        raise InvalidFrequencyError(f"Class frequencies sum to {freqs.sum():.12f}, expected 1")
    return freqs


def _assign_cell_classes(areas: np.ndarray, freqs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw a class per cell, favouring classes still short of their target area"""
    target = freqs * areas.sum()
    assigned = np.zeros(N_CLASSES, dtype=np.float64)
    classes = np.zeros(areas.size, dtype=np.uint8)
    for cell in rng.permutation(areas.size):
        deficit = np.clip(target - assigned, 0.0, None)
        p = deficit / deficit.sum() if deficit.sum() > 0 else freqs
        cls = rng.choice(N_CLASSES, p=p)
        classes[cell] = cls
        assigned[cls] += areas[cell]
    return classes


def majority_filter(labels: np.ndarray, radius: int) -> np.ndarray:
    """Replace every label by the most frequent class in a (2r+1)² window"""
    if radius <= 0:
        return labels
    size = 2 * radius + 1
    present = np.unique(labels)
    votes = np.full((N_CLASSES,) + labels.shape, -1.0, dtype=np.float32)
    for c in present:
        votes[c] = ndimage.uniform_filter(
            (labels == c).astype(np.float32), size=size, mode="nearest"
        )
    return np.argmax(votes, axis=0).astype(np.uint8)


def render_texture(labels: np.ndarray, texture: TextureConfig, rng: np.random.Generator) -> np.ndarray:
    """RGB rendering of a label map"""
    palette = np.clip(PALETTE + np.asarray(texture.palette_shift, dtype=np.float32), 0, 255)
    image = palette[labels]
    if texture.bleed_fraction > 0 and texture.bleed_width > 0:
        size = 2 * texture.bleed_width + 1
        dilated = ndimage.grey_dilation(labels, size=(size, size), mode="nearest")
        eroded = ndimage.grey_erosion(labels, size=(size, size), mode="nearest")
        neighbour = np.where(dilated != labels, dilated, eroded)
        bleed = (dilated != eroded) & (rng.random(labels.shape) < texture.bleed_fraction)
        image[bleed] = palette[neighbour[bleed]]
    intensity = rng.normal(0.0, texture.speckle_std, size=labels.shape + (1,))
    chroma = rng.normal(0.0, texture.speckle_std / 2.0, size=labels.shape + (3,))
    image = image + intensity + chroma
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def generate_wsi(
    seed: int,
    height: int,
    width: int,
    class_freqs: Sequence[float],
    texture: TextureConfig = TARGET_TEXTURE,
    wsi_id: Optional[str] = None,
    region_size: Optional[int] = None,
) -> SyntheticWsi:
    """Generate a deterministic synthetic slide

    Args:
        seed (int): generator seed, identical seeds give bit-identical slides
        height (int): slide height in pixels
        width (int): slide width in pixels
        class_freqs (Sequence[float]): target fraction per ClassId, summing to 1
        texture (TextureConfig): rendering parameters
        region_size (int): refinement region side; when given the slide must
            span at least MIN_REGIONS_PER_SIDE regions along each side
    Returns:
        SyntheticWsi: image, labels and realized class frequencies
    Raises:
        GeometryError: non-positive dimensions or a slide smaller than its regions allow
        InvalidFrequencyError: frequency vector off the simplex
    """
    if height <= 0 or width <= 0:
        raise GeometryError(f"Slide dimensions must be positive, got {height}x{width}")
    if region_size is not None:
        check_wsi_size(height, width, region_size)
    freqs = check_class_freqs(class_freqs)
    rng = np.random.default_rng(seed)

    n_cells = max(1, int(round(height * width / float(texture.cell_size) ** 2)))
    points = rng.uniform((0.0, 0.0), (height, width), size=(n_cells, 2))
    yy, xx = np.mgrid[0:height, 0:width]
    _, cell = cKDTree(points).query(np.column_stack([yy.ravel() + 0.5, xx.ravel() + 0.5]))
    cell = cell.reshape(height, width)
    areas = np.bincount(cell.ravel(), minlength=n_cells).astype(np.float64)

    cell_classes = _assign_cell_classes(areas, freqs, rng)
    labels = majority_filter(cell_classes[cell], texture.smooth_radius)
    image = render_texture(labels, texture, rng)
    realized = class_counts(labels) / labels.size
    logger.debug(
        f"Generated slide seed={seed} ({height}x{width}, {n_cells} cells), "
        f"realized frequencies {np.round(realized, 4).tolist()}"
    )
    return SyntheticWsi(
        image=image,
        labels=labels,
        seed=int(seed),
        class_freqs=freqs,
        realized_freqs=realized,
        texture=texture,
        wsi_id=wsi_id or f"wsi_{seed}",
    )


def save_wsi(wsi: SyntheticWsi, out_dir: PathLike) -> Path:
    """Write image PNG, label PNG and a JSON sidecar

    Returns:
        Path: path of the JSON sidecar
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(wsi.image).save(out_dir / f"{wsi.wsi_id}.png")
    Image.fromarray(wsi.labels).save(out_dir / f"{wsi.wsi_id}_labels.png")
    sidecar = out_dir / f"{wsi.wsi_id}.json"
    with open(sidecar, "w") as fw:
        json.dump(
            {
                "wsi_id": wsi.wsi_id,
                "seed": wsi.seed,
                "shape": list(wsi.shape),
                "class_freqs": wsi.class_freqs.tolist(),
                "realized_freqs": wsi.realized_freqs.tolist(),
                "texture": asdict(wsi.texture),
            },
            fw,
            indent=1,
            sort_keys=True,
        )
    return sidecar


def read_rgb(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Image {path} does not exist")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_labels(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Label raster {path} does not exist")
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8)


def write_labels(labels: np.ndarray, path: PathLike) -> None:
    Image.fromarray(labels.astype(np.uint8)).save(path)


def load_wsi(sidecar: PathLike) -> SyntheticWsi:
    sidecar = Path(sidecar)
    if not sidecar.exists():
        raise MissingArtifactError(f"Slide sidecar {sidecar} does not exist")
    with open(sidecar, "r") as fh:
        meta = json.load(fh)
    texture = meta["texture"]
    texture["palette_shift"] = tuple(texture["palette_shift"])
    return SyntheticWsi(
        image=read_rgb(sidecar.with_name(f"{meta['wsi_id']}.png")),
        labels=read_labels(sidecar.with_name(f"{meta['wsi_id']}_labels.png")),
        seed=meta["seed"],
        class_freqs=np.asarray(meta["class_freqs"]),
        realized_freqs=np.asarray(meta["realized_freqs"]),
        texture=TextureConfig(**texture),
        wsi_id=meta["wsi_id"],
    )


def is_background_tile(tile: np.ndarray, fraction: float = BACKGROUND_TILE_FRACTION) -> bool:
    """True when at least ``fraction`` of the tile is near-white glass"""
    near_white = tile.min(axis=-1) >= NEAR_WHITE
    return bool(near_white.mean() >= fraction)


def split_counts(n: int, splits: Sequence[float]) -> Tuple[int, int, int]:
    fractions = np.asarray(splits, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-6:
        raise ConfigError(f"Split fractions must be three non-negative values summing to 1, got {splits}")
    n_train = int(round(fractions[0] * n))
    n_valid = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_valid, n - n_train - n_valid


def assign_splits(coords: Sequence[Tuple[int, int]], splits: Sequence[float], seed: int) -> List[str]:
    """Seeded, disjoint split assignment by hash of grid coordinates"""
    n_train, n_valid, _ = split_counts(len(coords), splits)
    keys = np.array([derive_seed(seed, r, c) for r, c in coords], dtype=np.uint64)
    order = np.argsort(keys, kind="stable")
    assigned = [""] * len(coords)
    for rank, idx in enumerate(order):
        if rank < n_train:
            assigned[idx] = "train"
        elif rank < n_train + n_valid:
            assigned[idx] = "valid"
        else:
            assigned[idx] = "test"
    return assigned


def derive_patch_dataset(
    wsi: SyntheticWsi,
    patch_size: int,
    out_dir: PathLike,
    splits: Sequence[float] = (0.8, 0.1, 0.1),
    split_seed: int = 0,
) -> Dict[str, DatasetManifest]:
    """Cut a slide into labelled tissue tiles

    Every tile is labelled by its dominant class; tiles that are mostly white
    glass are dropped. Tile PNGs are written to ``out_dir/tiles``.

    Returns:
        Dict[str, DatasetManifest]: one manifest per split, rooted at out_dir
    Raises:
        GeometryError: patch larger than the slide
    """
    h, w = wsi.shape
    if patch_size <= 0 or patch_size > h or patch_size > w:
        raise GeometryError(f"Patch size {patch_size} does not fit a {h}x{w} slide")
    out_dir = Path(out_dir)
    tile_dir = out_dir / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)

    image, _ = pad_to_multiple(wsi.image, (patch_size, patch_size))
    labels, _ = pad_to_multiple(wsi.labels, (patch_size, patch_size))
    kept = []
    for r in range(0, image.shape[0], patch_size):
        for c in range(0, image.shape[1], patch_size):
            tile = image[r:r + patch_size, c:c + patch_size]
            if is_background_tile(tile):
                continue
            label = dominant_class(labels[r:r + patch_size, c:c + patch_size])
            kept.append(((r // patch_size, c // patch_size), (r, c), tile, label))
    n_tiles = (image.shape[0] // patch_size) * (image.shape[1] // patch_size)
    logger.debug(f"{wsi.wsi_id}: kept {len(kept)} of {n_tiles} tiles after tissue filtering")

    assigned = assign_splits([k[0] for k in kept], splits, derive_seed(split_seed, wsi.seed))
    geometry = Geometry(h, w, (patch_size, patch_size), (patch_size, patch_size))
    manifests = {s: DatasetManifest(split=s, kind="patch", geometry=geometry, root=out_dir) for s in SPLITS}
    for (coords, origin, tile, label), split in zip(kept, assigned):
        relpath = f"tiles/{wsi.wsi_id}_r{coords[0]:04d}_c{coords[1]:04d}.png"
        Image.fromarray(tile).save(out_dir / relpath)
        manifests[split].items.append(
            ManifestItem(path=relpath, coords=coords, origin=origin, source=wsi.wsi_id, label=int(label))
        )
    return manifests


def check_wsi_size(height: int, width: int, region_size: int) -> None:
    min_side = MIN_REGIONS_PER_SIDE * region_size
    if height < min_side or width < min_side:
        raise GeometryError(
            f"Slide {height}x{width} is smaller than {MIN_REGIONS_PER_SIDE} regions of {region_size} px per side"
        )


def check_region_size(region_size: int, patch_size: int) -> int:
    """Return k such that region_size == patch_size * 2**k, k >= 1"""
    if patch_size <= 0 or region_size % patch_size:
        raise GeometryError(f"Region size {region_size} is not a multiple of patch size {patch_size}")
    ratio = region_size // patch_size
    k = int(ratio).bit_length() - 1
    if ratio < 2 or (1 << k) != ratio:
        raise GeometryError(
            f"Region size {region_size} must be patch size {patch_size} times a power of two >= 2"
        )
    return k


def derive_region_dataset(
    wsi: SyntheticWsi,
    region_size: int,
    out_dir: PathLike,
    patch_size: int = 16,
    split: str = "train",
) -> DatasetManifest:
    """Cut a slide into regions with one-hot ground-truth masks

    Region PNGs go to ``out_dir/regions`` and masks, as tensor containers, to
    ``out_dir/masks``.
    """
    check_region_size(region_size, patch_size)
    out_dir = Path(out_dir)
    (out_dir / "regions").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    grid, crops = split_into_regions(wsi.image, (region_size, region_size))
    _, label_crops = split_into_regions(wsi.labels, (region_size, region_size))
    geometry = Geometry(wsi.shape[0], wsi.shape[1], grid.region_shape, (patch_size, patch_size))
    manifest = DatasetManifest(split=split, kind="region", geometry=geometry, root=out_dir)
    for (r, c), crop, label_crop in zip(grid.coords, crops, label_crops):
        coords = (r // region_size, c // region_size)
        stem = f"{wsi.wsi_id}_r{coords[0]:03d}_c{coords[1]:03d}"
        Image.fromarray(crop).save(out_dir / "regions" / f"{stem}.png")
        write_tensors(
            out_dir / "masks" / f"{stem}.bin",
            {"mask": ProbMask.one_hot(label_crop).values},
            meta={"kind": "one-hot", "source": wsi.wsi_id, "coords": list(coords)},
        )
        manifest.items.append(
            ManifestItem(
                path=f"regions/{stem}.png",
                coords=coords,
                origin=(r, c),
                source=wsi.wsi_id,
                mask=f"masks/{stem}.bin",
            )
        )
    return manifest


def merge_manifests(manifests: Iterable[DatasetManifest]) -> DatasetManifest:
    """Concatenate manifests of one split and kind that share a root"""
    manifests = list(manifests)
    if not manifests:
        raise EmptyDatasetError("Nothing to merge")
    first = manifests[0]
    for m in manifests[1:]:
        if (m.split, m.kind, Path(m.root)) != (first.split, first.kind, Path(first.root)):
            raise GeometryError(f"Cannot merge {m} into {first}")
        if (m.geometry.region, m.geometry.patch) != (first.geometry.region, first.geometry.patch):
            raise GeometryError("Cannot merge manifests with different tiling geometry")
    return DatasetManifest(
        split=first.split,
        kind=first.kind,
        geometry=first.geometry,
        items=[item for m in manifests for item in m.items],
        root=first.root,
    )


def load_patch_arrays(manifest: DatasetManifest) -> Tuple[np.ndarray, np.ndarray]:
    """Tiles and labels of a patch manifest

    Returns:
        Tuple[np.ndarray, np.ndarray]: N×h'×w'×3 uint8 tiles and N int64 labels
    """
    if len(manifest) == 0:
        return (
            np.zeros((0,) + tuple(manifest.geometry.patch) + (3,), dtype=np.uint8),
            np.zeros(0, dtype=np.int64),
        )
    tiles = np.stack([read_rgb(manifest.resolve(item.path)) for item in manifest.items])
    labels = np.array([item.label for item in manifest.items], dtype=np.int64)
    return tiles, labels


def load_region_mask(manifest: DatasetManifest, item: ManifestItem) -> ProbMask:
    path = manifest.resolve(item.mask)
    if not path.exists():
        raise MissingArtifactError(f"Region mask {path} does not exist")
    return ProbMask(read_tensors(path).tensors["mask"], "one-hot")


def class_distribution_table(manifests: Dict[str, DatasetManifest]) -> pd.DataFrame:
    """Per-split tile counts by dominant class, with a total and percentage row"""
    rows = {}
    for split in SPLITS:
        labels = [item.label for item in manifests[split].items] if split in manifests else []
        rows[split.capitalize()] = np.bincount(np.asarray(labels, dtype=np.intp), minlength=N_CLASSES)
    table = pd.DataFrame.from_dict(rows, orient="index", columns=list(CLASS_NAMES))
    total = table.sum(axis=0)
    table.loc["Total"] = total
    n = total.sum()
    table.loc["Total (%)"] = (100.0 * total / n).round(2) if n else 0.0
    table.index.name = "Dataset"
    return table
