import json

import numpy as np
import pytest

from lst.checkpoint import CheckpointStore
from lst.errors import CheckpointError


@pytest.fixture
def store(tmp_path):
    return CheckpointStore(root=tmp_path / "ckpt")


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "c": np.array(1.0 / 3.0)}


def test_float64_roundtrip_is_exact(store, tensors):
    store.save_tensors("step-0000001", tensors, dtype="float64", meta={"step": 1})
    loaded, meta = store.load_tensors("step-0000001")
    assert list(loaded) == ["a", "b", "c"]
    for name, array in tensors.items():
        np.testing.assert_array_equal(loaded[name], array)
        assert loaded[name].shape == np.shape(array)
    assert meta == {"step": 1}


def test_float32_export_loses_precision(store, tensors):
    store.save_tensors("weights", tensors)
    loaded, meta = store.load_tensors("weights")
    assert meta == {}
    assert loaded["a"].dtype == np.float64
    np.testing.assert_allclose(loaded["a"], tensors["a"], rtol=1e-6)
    assert store.load_manifest("weights")["dtype"] == "float32"


def test_manifest_layout(store, tensors):
    store.save_tensors("weights", tensors, dtype="float64")
    manifest = json.loads(store.get_object("weights/manifest.json"))
    assert manifest["format"] == "lst-checkpoint"
    assert [e["offset"] for e in manifest["tensors"]] == [0, 96, 136]
    assert store.object_exists("weights/tensors.bin")


def test_missing_checkpoint(store):
    with pytest.raises(CheckpointError):
        store.load_tensors("nope")
    assert not store.object_exists("nope/manifest.json")


def test_truncated_tensor_file(store, tensors):
    store.save_tensors("weights", tensors, dtype="float64")
    store.put_object("weights/tensors.bin", b"\x00" * 8)
    with pytest.raises(CheckpointError):
        store.load_tensors("weights")


def test_malformed_manifest(store):
    store.put_object("bad/manifest.json", "{not json")
    with pytest.raises(CheckpointError):
        store.load_manifest("bad")
    store.put_object("bad/manifest.json", json.dumps({"dtype": "int8", "tensors": []}))
    with pytest.raises(CheckpointError):
        store.load_manifest("bad")


def test_unsupported_dtype(store, tensors):
    with pytest.raises(CheckpointError):
        store.save_tensors("weights", tensors, dtype="float16")


def test_put_and_get_object(store):
    store.put_object("runs/notes.txt", "hello")
    assert store.get_object("runs/notes.txt") == "hello"


def test_missing_root_without_create(tmp_path):
    with pytest.raises(CheckpointError):
        CheckpointStore(root=tmp_path / "absent", create=False)
