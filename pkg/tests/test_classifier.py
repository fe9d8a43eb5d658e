import numpy as np
import pytest
import torch
import torch.nn.functional as F

from necroseg.classifier import (
    TinyVitConfig,
    classify_patch,
    classify_patches,
    classify_region,
    evaluate_accuracy,
    finetune_lora,
    freeze_base,
    frozen_checksum,
    init_classifier,
    inject_lora,
    load_base_checkpoint,
    load_lora_checkpoint,
    lora_train_step,
    merge_lora,
    pretrain_base,
    save_base_checkpoint,
    save_lora_checkpoint,
    to_input,
    trainable_parameters,
)
from necroseg.classifier.lora import lora_modules
from necroseg.core import reference_class_freqs
from necroseg.core.ledger import RunLedger
from necroseg.core.tensorio import read_tensors, write_tensors
from necroseg.exceptions import (
    EmptyDatasetError,
    InvalidModelConfigError,
    LoraRankError,
    MissingArtifactError,
    ShapeMismatchError,
)
from necroseg.synthgen import SOURCE_TEXTURE, generate_wsi
from necroseg.tiling import dominant_class, split_into_patches

CONFIG = TinyVitConfig(image_size=8, token_size=4, embed_dim=8, depth=1, heads=2)


@pytest.fixture
def frozen_model():
    return freeze_base(init_classifier(CONFIG, seed=1))


@pytest.fixture
def batch():
    rng = np.random.default_rng(2)
    patches = rng.integers(0, 256, size=(16, 8, 8, 3), dtype=np.uint8)
    labels = rng.integers(0, 7, size=16)
    return patches, labels


@pytest.fixture(scope="module")
def source_tiles():
    wsi = generate_wsi(21, 64, 64, reference_class_freqs(), texture=SOURCE_TEXTURE)
    _, tiles = split_into_patches(wsi.image, 8)
    _, label_tiles = split_into_patches(wsi.labels, 8)
    return np.stack(tiles), np.array([dominant_class(t) for t in label_tiles])


def _perturb_adapters(model, seed=0):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, layer in lora_modules(model):
            layer.lora_B.copy_(torch.randn(layer.lora_B.shape, generator=generator, dtype=layer.lora_B.dtype) * 0.1)


def test_init_classifier():
    a = init_classifier(CONFIG, seed=3)
    b = init_classifier(CONFIG, seed=3)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), name
    logits = a(torch.zeros(1, 3, 8, 8))
    assert logits.shape == (1, 7)
    assert torch.isfinite(logits).all()
    assert float(F.softmax(logits, dim=1).sum()) == pytest.approx(1.0, abs=1e-6)


def test_init_classifier_invalid_config():
    with pytest.raises(InvalidModelConfigError):
        init_classifier(TinyVitConfig(image_size=10, token_size=4), seed=0)
    with pytest.raises(InvalidModelConfigError):
        init_classifier(TinyVitConfig(embed_dim=9, heads=2), seed=0)


def test_pretrain_base(tmp_path, source_tiles):
    patches, labels = source_tiles
    model = init_classifier(CONFIG, seed=0)
    ledger = RunLedger(tmp_path / "ledger.jsonl")
    pretrain_base(model, patches, labels, epochs=30, lr=1e-3, batch_size=16, ledger=ledger)
    assert evaluate_accuracy(model, patches, labels) > 1 / 7
    assert all(not p.requires_grad for p in model.parameters())
    assert len(ledger.curves("pretrain")) == 30


def test_pretrain_loss_decreases_on_fixed_batch(tmp_path, source_tiles):
    patches, labels = source_tiles
    model = init_classifier(CONFIG, seed=0)
    ledger = RunLedger(tmp_path / "ledger.jsonl")
    # one batch per epoch, so every logged loss precedes one update
    pretrain_base(model, patches[:32], labels[:32], epochs=3, lr=1e-3, batch_size=32, ledger=ledger)
    losses = ledger.curves("pretrain")["loss"].to_numpy()
    assert np.all(np.diff(losses) <= 0)


def test_pretrain_empty():
    model = init_classifier(CONFIG, seed=0)
    with pytest.raises(EmptyDatasetError):
        pretrain_base(model, np.zeros((0, 8, 8, 3), dtype=np.uint8), np.zeros(0, dtype=int))


def test_inject_lora_is_transparent(frozen_model):
    patches = np.random.default_rng(0).integers(0, 256, size=(100, 8, 8, 3), dtype=np.uint8)
    x = to_input(patches, frozen_model)
    with torch.no_grad():
        before = frozen_model(x)
        inject_lora(frozen_model, rank=2)
        after = frozen_model(x)
    assert torch.equal(before, after)


def test_inject_lora_parameters(frozen_model):
    inject_lora(frozen_model, rank=4)
    layers = dict(lora_modules(frozen_model))
    assert sorted(layers) == ["blocks.0.attn.k", "blocks.0.attn.o", "blocks.0.attn.q", "blocks.0.attn.v"]
    for layer in layers.values():
        assert layer.lora_A.numel() + layer.lora_B.numel() == 2 * 4 * 8
    names = {name for name, _ in trainable_parameters(frozen_model)}
    assert {"head.weight", "head.bias"} <= names
    assert all("lora_" in name or name.startswith("head.") for name in names)


def test_inject_lora_rank_bounds():
    inject_lora(freeze_base(init_classifier(CONFIG, seed=0)), rank=8)
    with pytest.raises(LoraRankError):
        inject_lora(freeze_base(init_classifier(CONFIG, seed=0)), rank=9)
    with pytest.raises(LoraRankError):
        inject_lora(freeze_base(init_classifier(CONFIG, seed=0)), rank=0)


def test_inject_lora_preconditions(frozen_model):
    with pytest.raises(InvalidModelConfigError):
        inject_lora(init_classifier(CONFIG, seed=0), rank=2)
    inject_lora(frozen_model, rank=2)
    with pytest.raises(InvalidModelConfigError):
        inject_lora(frozen_model, rank=2)


def test_lora_train_step_zero_rate(frozen_model, batch):
    inject_lora(frozen_model, rank=2)
    before = {name: p.clone() for name, p in frozen_model.named_parameters()}
    x = to_input(batch[0], frozen_model)
    loss = lora_train_step(frozen_model, (x, torch.as_tensor(batch[1])), lr=0.0)
    assert np.isfinite(loss) and loss > 0
    for name, p in frozen_model.named_parameters():
        assert torch.equal(p, before[name]), name


def test_frozen_checksum_constant(frozen_model, batch):
    checksum = frozen_checksum(frozen_model)
    inject_lora(frozen_model, rank=2)
    assert frozen_checksum(frozen_model) == checksum
    x, y = to_input(batch[0], frozen_model), torch.as_tensor(batch[1])
    head = frozen_model.head.weight.clone()
    losses = [lora_train_step(frozen_model, (x, y), lr=0.05) for _ in range(100)]
    assert frozen_checksum(frozen_model) == checksum
    assert not torch.equal(head, frozen_model.head.weight)
    assert losses[-1] < losses[0]


def test_lora_train_step_empty(frozen_model):
    inject_lora(frozen_model, rank=2)
    with pytest.raises(EmptyDatasetError):
        lora_train_step(frozen_model, (torch.zeros(0, 3, 8, 8), torch.zeros(0, dtype=torch.long)), lr=0.1)


def test_gradients_match_finite_differences():
    model = freeze_base(init_classifier(CONFIG, seed=4, dtype=torch.float64))
    inject_lora(model, rank=2, seed=4)
    _perturb_adapters(model)
    rng = np.random.default_rng(4)
    x = torch.as_tensor(rng.random((2, 3, 8, 8)))
    y = torch.tensor([1, 6])
    params = [p for _, p in trainable_parameters(model)]
    analytic = torch.autograd.grad(F.cross_entropy(model(x), y), params)

    h = 1e-5
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, grad = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                plus = float(F.cross_entropy(model(x), y))
                flat[i] = orig - h
                minus = float(F.cross_entropy(model(x), y))
                flat[i] = orig
                fd = (plus - minus) / (2 * h)
                assert abs(fd - float(grad[i])) <= 1e-4 * max(abs(fd), abs(float(grad[i]))) + 1e-9


def test_update_is_low_rank(batch):
    model = freeze_base(init_classifier(CONFIG, seed=5, dtype=torch.float64))
    inject_lora(model, rank=2)
    x, y = to_input(batch[0], model), torch.as_tensor(batch[1])
    for _ in range(20):
        lora_train_step(model, (x, y), lr=0.5)
    for _, layer in lora_modules(model):
        singular = torch.linalg.svdvals(layer.delta_weight().detach())
        assert singular[0] > 0
        assert torch.all(singular[2:] < 1e-10)


def test_classify_patch(frozen_model, batch):
    patches, _ = batch
    probs = classify_patches(frozen_model, patches[:8])
    assert probs.shape == (8, 7)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(probs >= 0)
    single = classify_patch(frozen_model, patches[3])
    np.testing.assert_array_equal(single, classify_patch(frozen_model, patches[3]))
    np.testing.assert_allclose(single, probs[3], atol=1e-6)
    with pytest.raises(ShapeMismatchError):
        classify_patch(frozen_model, np.zeros((16, 16, 3), dtype=np.uint8))


def test_classify_region(frozen_model):
    region = np.random.default_rng(1).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    mask = classify_region(frozen_model, region)
    assert mask.shape == (7, 32, 32)
    np.testing.assert_allclose(mask.values.sum(axis=0), 1.0, atol=1e-6)
    labels = mask.argmax()
    for r in range(0, 32, 8):
        for c in range(0, 32, 8):
            assert np.all(labels[r:r + 8, c:c + 8] == labels[r, c])


def test_finetune_lora(frozen_model, batch, tmp_path):
    inject_lora(frozen_model, rank=2)
    ledger = RunLedger(tmp_path / "ledger.jsonl")
    accuracies = finetune_lora(frozen_model, batch, valid=batch, epochs=2, batch_size=8, ledger=ledger)
    assert len(accuracies) == 2
    assert all(0.0 <= a <= 1.0 for a in accuracies)
    assert len(ledger.curves("lora")) == 4


def test_merge_lora(frozen_model, batch):
    inject_lora(frozen_model, rank=2)
    _perturb_adapters(frozen_model)
    merged = merge_lora(frozen_model)
    assert not list(lora_modules(merged))
    np.testing.assert_allclose(
        classify_patches(merged, batch[0]), classify_patches(frozen_model, batch[0]), atol=1e-5
    )


def test_checkpoints(tmp_path, frozen_model, batch):
    base_path = tmp_path / "classifier_base.bin"
    lora_path = tmp_path / "classifier_lora.bin"
    checksum = save_base_checkpoint(frozen_model, base_path)
    base = load_base_checkpoint(base_path)
    assert frozen_checksum(base) == checksum

    inject_lora(frozen_model, rank=2)
    x, y = to_input(batch[0], frozen_model), torch.as_tensor(batch[1])
    for _ in range(5):
        lora_train_step(frozen_model, (x, y), lr=0.1)
    save_lora_checkpoint(frozen_model, lora_path, base_path)
    assert lora_path.stat().st_size < base_path.stat().st_size

    loaded = load_lora_checkpoint(lora_path)
    np.testing.assert_array_equal(classify_patches(loaded, batch[0]), classify_patches(frozen_model, batch[0]))


def test_checkpoint_base_mismatch(tmp_path, frozen_model):
    base_path = tmp_path / "base.bin"
    other_path = tmp_path / "other.bin"
    save_base_checkpoint(frozen_model, base_path)
    save_base_checkpoint(freeze_base(init_classifier(CONFIG, seed=99)), other_path)
    inject_lora(frozen_model, rank=2)
    save_lora_checkpoint(frozen_model, tmp_path / "lora.bin", base_path)
    with pytest.raises(MissingArtifactError):
        load_lora_checkpoint(tmp_path / "lora.bin", base_path=other_path)
    with pytest.raises(MissingArtifactError):
        load_lora_checkpoint(tmp_path / "missing.bin")


def test_lora_checkpoint_missing_adapter(tmp_path, frozen_model):
    base_path = tmp_path / "base.bin"
    lora_path = tmp_path / "lora.bin"
    save_base_checkpoint(frozen_model, base_path)
    inject_lora(frozen_model, rank=2)
    save_lora_checkpoint(frozen_model, lora_path, base_path)

    stored = read_tensors(lora_path)
    dropped = next(name for name in stored.tensors if name.endswith("lora_B"))
    tensors = {name: a for name, a in stored.tensors.items() if name != dropped}
    write_tensors(tmp_path / "partial.bin", tensors, meta=stored.meta)
    with pytest.raises(MissingArtifactError, match="lora_B"):
        load_lora_checkpoint(tmp_path / "partial.bin", base_path=base_path)
