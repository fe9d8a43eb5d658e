import numpy as np
import pytest

from necroseg.core import (
    CLASS_NAMES,
    ClassId,
    N_CLASSES,
    derive_seed,
    reference_class_freqs,
    sha256_bytes,
    sha256_file,
)
from necroseg.core.ledger import RunLedger
from necroseg.core.tensorio import MAGIC, read_header, read_tensors, write_tensors
from necroseg.core.workspace import Workspace, require
from necroseg.exceptions import (
    ConfigError,
    EmptyDatasetError,
    Error,
    FrozenBaseError,
    MissingArtifactError,
    NumericalError,
    TensorFileError,
)


def test_class_table():
    assert N_CLASSES == 7
    assert CLASS_NAMES == ("BG", "VT", "NC", "FH", "HC", "IF", "NT")
    assert ClassId.NT == 6


def test_reference_class_freqs():
    freqs = reference_class_freqs()
    assert freqs.shape == (7,)
    assert abs(freqs.sum() - 1.0) < 1e-12
    assert freqs.argmax() == ClassId.NT


def test_derive_seed():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    assert 0 <= derive_seed(0) < 2**63


def test_exit_codes():
    assert ConfigError("x").exit_code == 2
    assert MissingArtifactError("x").exit_code == 3
    assert NumericalError("x").exit_code == 4
    assert TensorFileError("x").exit_code == 1
    assert EmptyDatasetError("x").exit_code == 3
    assert isinstance(EmptyDatasetError("x"), MissingArtifactError)
    assert FrozenBaseError("x").exit_code == 4
    assert isinstance(TensorFileError("x"), Error)
    assert ConfigError("bad key").message == "bad key"


def test_tensor_container(tmp_path):
    path = tmp_path / "t.bin"
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.linspace(0, 1, 5)
    write_tensors(
        path,
        {"a": a, "b": b},
        meta={"kind": "test"},
        frozen={"a": True},
        adapters={"b": "a"},
    )
    with open(path, "rb") as fh:
        assert fh.read(8) == MAGIC
    stored = read_tensors(path)
    assert stored.meta == {"kind": "test"}
    assert stored.tensors["a"].dtype == np.float32
    assert stored.tensors["b"].dtype == np.float64
    np.testing.assert_array_equal(stored.tensors["a"], a)
    np.testing.assert_array_equal(stored.tensors["b"], b)
    assert stored.entries["a"].frozen is True
    assert stored.entries["b"].frozen is False
    assert stored.entries["b"].adapter == "a"
    assert stored.entries["b"].offset == a.nbytes


def test_tensor_container_is_hash_stable(tmp_path):
    tensors = {"w": np.ones((3, 3))}
    write_tensors(tmp_path / "1.bin", tensors, meta={"b": 1, "a": 2})
    write_tensors(tmp_path / "2.bin", tensors, meta={"a": 2, "b": 1})
    assert sha256_file(tmp_path / "1.bin") == sha256_file(tmp_path / "2.bin")


def test_tensor_container_errors(tmp_path):
    with pytest.raises(TensorFileError):
        write_tensors(tmp_path / "int.bin", {"i": np.arange(3)})
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTATENSORFILE")
    with pytest.raises(TensorFileError):
        read_header(bad)
    path = tmp_path / "cut.bin"
    write_tensors(path, {"w": np.ones(100)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(TensorFileError):
        read_tensors(path)


def test_sha256(tmp_path):
    path = tmp_path / "f.txt"
    path.write_bytes(b"abc")
    assert sha256_file(path) == sha256_bytes(b"abc")
    assert sha256_bytes(b"a", b"bc") == sha256_bytes(b"abc")


def test_run_ledger(tmp_path):
    ledger = RunLedger(tmp_path / "ledger.jsonl")
    ledger.log_config({"seed": 1})
    for step in range(3):
        ledger.log_step("lora", step, loss=1.0 / (step + 1))
    artifact = tmp_path / "a.txt"
    artifact.write_text("hello")
    digest = ledger.log_artifact(artifact, "report")
    with ledger.timing("stage"):
        pass

    reloaded = RunLedger(tmp_path / "ledger.jsonl")
    assert len(reloaded.entries) == len(ledger.entries) == 6
    assert reloaded.entries[0]["code_version"]
    curves = reloaded.curves("lora")
    assert list(curves["step"]) == [0, 1, 2]
    assert curves["loss"].iloc[2] == pytest.approx(1 / 3)
    assert reloaded.artifacts() == {str(artifact): digest}
    assert reloaded.latest_artifact("report")["sha256"] == sha256_file(artifact)
    assert reloaded.latest_artifact("missing") is None


def test_workspace_layout(tmp_path):
    ws = Workspace(tmp_path / "ws").create()
    assert ws.wsi_dir("eval").is_dir()
    assert ws.coarse_cache.is_dir()
    assert ws.classifier_lora.name == "classifier_lora.bin"
    assert ws.prediction("eval_00", "refined").name == "eval_00_refined.png"
    assert ws.manifest("patches", "train").name == "train.json"
    with pytest.raises(MissingArtifactError, match="train-refiner"):
        require(ws.refiner, "train-refiner")
