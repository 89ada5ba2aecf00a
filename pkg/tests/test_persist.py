import json
import struct

import numpy as np
import pytest

from freqbias import persist
from freqbias.errors import ChecksumError, ConfigError, FormatError, IoError, VersionError
from freqbias.model import Model, ModelConfig
from freqbias.tensorcore import no_grad

CFG = dict(stages=[[4, 1], [6, 1]], in_shape=[3, 8, 8], classes=4, fpcm_placement="per_stage_end")


def trained_like(seed=0):
    m = Model(ModelConfig(**CFG), seed=seed)
    rng = np.random.default_rng(seed)
    for t in m.params.values():
        t.data += rng.standard_normal(t.shape).astype(t.dtype) * 0.01
    for b in m.buffers.values():
        b += rng.random(b.shape)
    m.set_beta(0.3125)
    m.train()
    return m


def test_round_trip_is_bit_identical(tmp_path):
    m = trained_like()
    path = tmp_path / "m.fqb"
    persist.save(m, {"epoch": 7}, path, optimizer_state={"momentum.0": np.ones(3)})
    loaded, meta = persist.load(path)
    assert meta["epoch"] == 7 and meta["beta"] == 0.3125
    assert loaded.beta == 0.3125 and not loaded.training
    for k, t in m.params.items():
        assert loaded.params[k].data.tobytes() == t.data.tobytes()
    for k, b in m.buffers.items():
        assert loaded.buffers[k].tobytes() == b.tobytes()
    np.testing.assert_array_equal(meta["optimizer"]["momentum.0"], np.ones(3))
    x = np.random.default_rng(0).random((2, 3, 8, 8)).astype(np.float32)
    m.eval()
    with no_grad():
        np.testing.assert_array_equal(m(x).data, loaded(x).data)


def test_payload_is_little_endian_float32(tmp_path):
    m = trained_like()
    raw = persist.encode(m, {})
    _, _, hlen, _ = struct.unpack_from("<8sIQ32s", raw)
    header = json.loads(raw[52:52 + hlen])
    entry = next(e for e in header["tensors"] if e["kind"] == "param")
    assert entry["dtype"] == "<f4"
    blob = raw[52 + hlen + entry["offset"]:52 + hlen + entry["offset"] + entry["nbytes"]]
    np.testing.assert_array_equal(np.frombuffer(blob, "<f4"), m.params[entry["name"]].data.ravel())


@pytest.mark.parametrize("where", ["payload", "header", "digest"])
def test_single_byte_corruption_detected(tmp_path, where):
    path = tmp_path / "m.fqb"
    persist.save(trained_like(), {}, path)
    raw = bytearray(path.read_bytes())
    _, _, hlen, _ = struct.unpack_from("<8sIQ32s", raw)
    pos = {"payload": len(raw) - 5, "header": 52 + hlen // 2, "digest": 30}[where]
    raw[pos] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        persist.load(path)


def test_every_byte_flip_is_caught(tmp_path):
    raw = bytearray(persist.encode(trained_like(), {}))
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(raw), 60, replace=False):
        bad = bytearray(raw)
        bad[pos] ^= 0xFF
        with pytest.raises((ChecksumError, FormatError, VersionError)):
            persist.decode(bytes(bad))


def test_version_and_magic(tmp_path):
    raw = bytearray(persist.encode(trained_like(), {}))
    v2 = bytearray(raw)
    struct.pack_into("<I", v2, 8, 99)
    with pytest.raises(VersionError):
        persist.decode(bytes(v2))
    with pytest.raises(FormatError):
        persist.decode(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(FormatError):
        persist.decode(b"abc")


def test_config_mismatch_refused(tmp_path):
    path = tmp_path / "m.fqb"
    persist.save(trained_like(), {}, path)
    other = ModelConfig(**{**CFG, "classes": 5})
    with pytest.raises(ConfigError):
        persist.load(path, expected_config=other)
    with pytest.raises(ConfigError):
        persist.load_into(Model(other), path)
    target = Model(ModelConfig(**CFG), seed=9)
    persist.load_into(target, path)
    assert target.beta == 0.3125


def test_missing_file_and_unwritable_dir(tmp_path):
    with pytest.raises(IoError):
        persist.load(tmp_path / "nope.fqb")
    with pytest.raises(IoError):
        persist.save(trained_like(), {}, tmp_path / "no" / "dir" / "m.fqb")


def test_save_is_atomic_and_leaves_no_temp(tmp_path):
    path = tmp_path / "m.fqb"
    persist.save(trained_like(0), {}, path)
    first = path.read_bytes()
    persist.save(trained_like(1), {}, path)
    assert path.read_bytes() != first
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.fqb"]


def test_save_is_deterministic(tmp_path):
    assert persist.encode(trained_like(), {"a": 1}) == persist.encode(trained_like(), {"a": 1})
