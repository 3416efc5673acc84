import json
import os
import struct

import numpy as np
import pytest

from vrwkv import checkpoint
from vrwkv.checkpoint import CheckpointError
from vrwkv.model import ModelConfig, init_params

CFG = ModelConfig(embed_dim=8, hidden_dim=16, depth=1, patch_size=2, num_classes=3, image_size=4)


def test_round_trip(tmp_path):
    params = init_params(CFG, 0)
    path = tmp_path / "m.vrwk"
    checkpoint.save(path, {"model": CFG.to_dict()}, params)
    meta, back = checkpoint.load(path)
    assert ModelConfig.from_dict(meta["model"]) == CFG
    assert list(back) == list(params)
    for name, p in params.items():
        assert back[name].dtype == np.float32 and back[name].shape == p.shape
        np.testing.assert_array_equal(back[name], p.astype(np.float32))


def test_byte_layout():
    data = checkpoint.dumps({"a": 1}, {"x": np.array([[1.0, 2.0, 3.0]]), "s": np.float32(5)})
    blob = json.dumps({"a": 1}).encode()
    want = (b"VRWK" + struct.pack("<II", 1, len(blob)) + blob
            + struct.pack("<I", 1) + b"x" + struct.pack("<III", 2, 1, 3)
            + np.array([1, 2, 3], "<f4").tobytes()
            + struct.pack("<I", 1) + b"s" + struct.pack("<I", 0) + np.array([5], "<f4").tobytes())
    assert data == want


def test_unicode_names_round_trip():
    _, back = checkpoint.loads(checkpoint.dumps({}, {"gewicht.ä": np.ones(2)}))
    assert list(back) == ["gewicht.ä"]


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + bytes(8))


def test_bad_version():
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(b"VRWK" + struct.pack("<II", 2, 2) + b"{}")


@pytest.mark.parametrize("cut", [6, 15, 30, -1])
def test_truncated(cut):
    data = checkpoint.dumps({"a": 1}, {"x": np.arange(4.0)})
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.loads(data[:cut])


def test_corrupt_config():
    with pytest.raises(CheckpointError, match="corrupt"):
        checkpoint.loads(b"VRWK" + struct.pack("<II", 1, 2) + b"{x")


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    path = tmp_path / "m.vrwk"
    checkpoint.save(path, {"v": 1}, {"x": np.zeros(2)})
    before = path.read_bytes()

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        checkpoint.save(path, {"v": 2}, {"x": np.ones(2)})
    assert path.read_bytes() == before
    assert os.listdir(tmp_path) == ["m.vrwk"]
