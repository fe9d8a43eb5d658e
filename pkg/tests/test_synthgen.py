import numpy as np
import pytest

from necroseg.core import ClassId, reference_class_freqs
from necroseg.exceptions import (
    ConfigError,
    GeometryError,
    InvalidFrequencyError,
    MissingArtifactError,
)
from necroseg.synthgen import (
    SOURCE_TEXTURE,
    SPLITS,
    DatasetManifest,
    assign_splits,
    check_region_size,
    check_wsi_size,
    class_distribution_table,
    derive_patch_dataset,
    derive_region_dataset,
    generate_wsi,
    is_background_tile,
    load_patch_arrays,
    load_region_mask,
    load_wsi,
    merge_manifests,
    save_wsi,
    split_counts,
)
from necroseg.tiling import dominant_class

VT_ONLY = (0, 1, 0, 0, 0, 0, 0)


def test_generate_wsi_is_deterministic():
    a = generate_wsi(7, 128, 128, reference_class_freqs())
    b = generate_wsi(7, 128, 128, reference_class_freqs())
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_wsi(8, 128, 128, reference_class_freqs())
    assert not np.array_equal(a.labels, c.labels)


def test_generate_wsi_shapes(small_wsi):
    assert small_wsi.image.shape == (64, 96, 3)
    assert small_wsi.image.dtype == np.uint8
    assert small_wsi.labels.shape == (64, 96)
    assert small_wsi.labels.max() <= ClassId.NT
    assert small_wsi.realized_freqs.sum() == pytest.approx(1.0)


def test_generate_wsi_matches_target_frequencies():
    freqs = reference_class_freqs()
    wsi = generate_wsi(11, 1024, 1024, freqs)
    assert np.all(np.abs(wsi.realized_freqs - freqs) <= 0.05)


def test_generate_wsi_single_class():
    wsi = generate_wsi(3, 64, 64, VT_ONLY)
    assert np.all(wsi.labels == ClassId.VT)


def test_generate_wsi_errors():
    with pytest.raises(InvalidFrequencyError):
        generate_wsi(0, 32, 32, (0.5, 0.6, 0, 0, 0, 0, 0))
    with pytest.raises(InvalidFrequencyError):
        generate_wsi(0, 32, 32, (1.0, 0.0))
    with pytest.raises(InvalidFrequencyError):
        generate_wsi(0, 32, 32, (1.5, -0.5, 0, 0, 0, 0, 0))
    with pytest.raises(GeometryError):
        generate_wsi(0, 0, 32, VT_ONLY)


def test_texture_families():
    a = generate_wsi(1, 32, 32, VT_ONLY)
    b = generate_wsi(1, 32, 32, VT_ONLY, texture=SOURCE_TEXTURE)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.image, b.image)


def test_slide_must_span_four_regions():
    wsi = generate_wsi(0, 64, 64, VT_ONLY, region_size=16)
    assert wsi.shape == (64, 64)
    with pytest.raises(GeometryError):
        generate_wsi(0, 64, 48, VT_ONLY, region_size=16)
    with pytest.raises(GeometryError):
        check_wsi_size(512, 512, 256)
    check_wsi_size(512, 512, 128)


def test_save_and_load_wsi(tmp_path, small_wsi):
    sidecar = save_wsi(small_wsi, tmp_path)
    assert sidecar.name == "small.json"
    loaded = load_wsi(sidecar)
    np.testing.assert_array_equal(loaded.image, small_wsi.image)
    np.testing.assert_array_equal(loaded.labels, small_wsi.labels)
    assert loaded.texture == small_wsi.texture
    with pytest.raises(MissingArtifactError):
        load_wsi(tmp_path / "missing.json")


def test_background_tile():
    assert is_background_tile(np.full((16, 16, 3), 255, dtype=np.uint8))
    assert not is_background_tile(np.full((16, 16, 3), 120, dtype=np.uint8))


def test_split_counts():
    assert split_counts(1000, (0.8, 0.1, 0.1)) == (800, 100, 100)
    assert sum(split_counts(7, (0.8, 0.1, 0.1))) == 7
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.5, 0.5))


def test_assign_splits_disjoint_and_seeded():
    coords = [(r, c) for r in range(40) for c in range(25)]
    assigned = assign_splits(coords, (0.8, 0.1, 0.1), seed=4)
    assert [assigned.count(s) for s in SPLITS] == [800, 100, 100]
    assert assigned == assign_splits(coords, (0.8, 0.1, 0.1), seed=4)
    assert assigned != assign_splits(coords, (0.8, 0.1, 0.1), seed=5)


def test_derive_patch_dataset_uniform(tmp_path):
    wsi = generate_wsi(2, 512, 512, VT_ONLY, wsi_id="vt")
    manifests = derive_patch_dataset(wsi, 16, tmp_path, split_seed=1)
    items = [item for split in SPLITS for item in manifests[split].items]
    assert len(items) == 1024
    assert all(item.label == ClassId.VT for item in items)
    assert [len(manifests[s]) for s in SPLITS] == [819, 102, 103]
    paths = [{item.path for item in manifests[s].items} for s in SPLITS]
    assert not (paths[0] & paths[1] or paths[0] & paths[2] or paths[1] & paths[2])


def test_derive_patch_dataset_labels_match(tmp_path, small_wsi):
    manifests = derive_patch_dataset(small_wsi, 16, tmp_path)
    train = manifests["train"]
    tiles, labels = load_patch_arrays(train)
    assert tiles.shape == (len(train), 16, 16, 3)
    for item, tile, label in zip(train.items, tiles, labels):
        r, c = item.origin
        np.testing.assert_array_equal(tile, small_wsi.image[r:r + 16, c:c + 16])
        assert label == dominant_class(small_wsi.labels[r:r + 16, c:c + 16])

    path = train.save(tmp_path / "train.json")
    loaded = DatasetManifest.load(path)
    assert loaded.to_dict() == train.to_dict()
    assert loaded.resolve(loaded.items[0].path).exists()


def test_derive_patch_dataset_patch_too_large(tmp_path, small_wsi):
    with pytest.raises(GeometryError):
        derive_patch_dataset(small_wsi, 128, tmp_path)


def test_check_region_size():
    assert check_region_size(128, 16) == 3
    assert check_region_size(32, 16) == 1
    for region in (16, 48, 100):
        with pytest.raises(GeometryError):
            check_region_size(region, 16)


def test_derive_region_dataset(tmp_path):
    wsi = generate_wsi(4, 512, 512, reference_class_freqs(), wsi_id="r")
    manifest = derive_region_dataset(wsi, 128, tmp_path, patch_size=16)
    assert len(manifest) == 16
    assert manifest.kind == "region"
    item = manifest.items[5]
    assert item.coords == (1, 1)
    mask = load_region_mask(manifest, item)
    assert mask.shape == (7, 128, 128)
    np.testing.assert_array_equal(mask.values.sum(axis=0), 1.0)
    np.testing.assert_array_equal(mask.argmax(), wsi.labels[128:256, 128:256])


def test_merge_manifests(tmp_path):
    a = derive_region_dataset(generate_wsi(1, 64, 64, VT_ONLY, wsi_id="a"), 32, tmp_path, patch_size=16)
    b = derive_region_dataset(generate_wsi(2, 64, 64, VT_ONLY, wsi_id="b"), 32, tmp_path, patch_size=16)
    merged = merge_manifests([a, b])
    assert len(merged) == 8
    c = derive_region_dataset(generate_wsi(3, 64, 64, VT_ONLY, wsi_id="c"), 32, tmp_path, patch_size=8)
    with pytest.raises(GeometryError):
        merge_manifests([a, c])


def test_class_distribution_table(tmp_path, small_wsi):
    table = class_distribution_table(derive_patch_dataset(small_wsi, 16, tmp_path))
    assert list(table.columns) == ["BG", "VT", "NC", "FH", "HC", "IF", "NT"]
    assert list(table.index) == ["Train", "Valid", "Test", "Total", "Total (%)"]
    assert table.loc["Total"].sum() == 24
    assert table.loc["Total (%)"].sum() == pytest.approx(100.0, abs=0.1)
