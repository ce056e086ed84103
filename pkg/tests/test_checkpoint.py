import struct

import numpy as np
import pytest

from singlespike.checkpoint import SNNC_MAGIC, load_checkpoint, save_checkpoint
from singlespike.data import SpikeDataset
from singlespike.errors import FormatError, LengthError
from singlespike.training import NetworkConfig, TrainConfig, train


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    labels = np.arange(24) % 2
    spikes = (rng.random((24, 3, 10)) < 0.3).astype(np.float32)
    data = SpikeDataset(spikes, labels)
    cfg = NetworkConfig([3, 5, 2], T=10, weight_gain=10.0)
    tcfg = TrainConfig(epochs=2, batch_size=8, milestones=(1,))
    model, log = train(cfg, tcfg, data)
    return model, log, tcfg


def test_round_trip(tmp_path, trained):
    model, log, tcfg = trained
    path = save_checkpoint(tmp_path / "m.snnc", model, log, tcfg)
    ck = load_checkpoint(path)
    assert ck.net.cfg == model.net.cfg
    assert ck.epoch == 2 and ck.best_epoch == log.best_epoch
    assert ck.best_loss == log.best_loss
    assert ck.train_cfg["milestones"] == [1]
    for a, b in zip(ck.net.layers + ck.best_params, model.net.layers + model.best_params):
        for name in ("weights", "bias", "beta"):
            x, y = getattr(a, name), getattr(b, name)
            assert x.dtype == y.dtype and np.array_equal(x, y)
    assert ck.optimizer.t == model.optimizer.t
    for k in model.optimizer.m:
        assert np.array_equal(ck.optimizer.m[k], model.optimizer.m[k])
        assert np.array_equal(ck.optimizer.v[k], model.optimizer.v[k])
    restored = ck.as_model()
    assert restored.epochs_run == 2


def test_layout_is_little_endian(tmp_path, trained):
    model, log, tcfg = trained
    raw = save_checkpoint(tmp_path / "m.snnc", model, log, tcfg).read_bytes()
    assert raw[:4] == SNNC_MAGIC
    version, head_len = struct.unpack_from("<II", raw, 4)
    assert version == 1
    (count,) = struct.unpack_from("<I", raw, 12 + head_len)
    assert count == 6 + 6 + 2 * 6
    off = 16 + head_len
    (name_len,) = struct.unpack_from("<H", raw, off)
    assert raw[off + 2:off + 2 + name_len] == b"layer.0.weights"
    code, ndim = struct.unpack_from("<BB", raw, off + 2 + name_len)
    dims = struct.unpack_from(f"<{ndim}I", raw, off + 4 + name_len)
    assert (code, dims) == (0, (5, 3))
    start = off + 4 + name_len + 4 * ndim
    w = np.frombuffer(raw, "<f4", count=15, offset=start).reshape(5, 3)
    assert np.array_equal(w, model.net.layers[0].weights)


def test_bad_magic_and_version(tmp_path, trained):
    model, log, tcfg = trained
    raw = bytearray(save_checkpoint(tmp_path / "m.snnc", model, log, tcfg).read_bytes())
    bad = tmp_path / "bad.snnc"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    raw[4:8] = struct.pack("<I", 9)
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(bad)


def test_truncated_and_trailing(tmp_path, trained):
    model, log, tcfg = trained
    raw = save_checkpoint(tmp_path / "m.snnc", model, log, tcfg).read_bytes()
    p = tmp_path / "x.snnc"
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        p.write_bytes(raw[:cut])
        with pytest.raises((LengthError, FormatError)):
            load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(p)
