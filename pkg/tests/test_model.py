import hashlib
import stat

import numpy as np
import pytest

from i2icodec.autodiff.params import dumps
from i2icodec.model import _UMASK, CheckpointError, Model, atomic_write


def test_save_load_round_trip(tmp_path, tiny_model):
    tiny_model.save(tmp_path / "m.i2p")
    back = Model.load(tmp_path / "m.i2p")
    assert back.cfg == tiny_model.cfg
    assert back.to_bytes() == tiny_model.to_bytes()
    assert back.fingerprint == hashlib.sha256((tmp_path / "m.i2p").read_bytes()).digest()


def test_fingerprint_tracks_content(tiny_cfg):
    a, b = Model.initialize(tiny_cfg, 0), Model.initialize(tiny_cfg, 1)
    assert a.fingerprint != b.fingerprint
    assert a.fingerprint == Model.initialize(tiny_cfg, 0).fingerprint


def test_damaged_checkpoints_are_rejected(tmp_path, tiny_model):
    blob = tiny_model.to_bytes()
    with pytest.raises(CheckpointError):
        Model.from_bytes(blob[:-10])
    with pytest.raises(CheckpointError):
        Model.from_bytes(dumps({"x": np.zeros(2, np.float32)}, {"kind": "other"}))
    arrays = tiny_model.params.snapshot()
    arrays["enc.stem.w"] = arrays["enc.stem.w"][:1]
    with pytest.raises(CheckpointError):
        Model.from_bytes(dumps(arrays, {"kind": "i2icodec-model", "net": tiny_model.cfg.to_dict()}))
    del arrays["enc.stem.w"]
    with pytest.raises(CheckpointError):
        Model.from_bytes(dumps(arrays, {"kind": "i2icodec-model", "net": tiny_model.cfg.to_dict()}))
    with pytest.raises(CheckpointError):
        Model.load(tmp_path / "absent.i2p")


def test_atomic_write_replaces_and_honours_umask(tmp_path):
    target = tmp_path / "sub" / "f.bin"
    atomic_write(target, b"one")
    atomic_write(target, b"two")
    assert target.read_bytes() == b"two"
    assert stat.S_IMODE(target.stat().st_mode) == 0o666 & ~_UMASK
    assert [p.name for p in target.parent.iterdir()] == ["f.bin"]
