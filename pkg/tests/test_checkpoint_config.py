import json
import struct

import numpy as np
import pytest

from srno import checkpoint as ckpt
from srno import operator as op
from srno import train as tr
from srno.config import config_from_dict, desk_config, model_config_dict, parse_config
from srno.errors import CheckpointError, ConfigError
from srno.model import SRNO

from conftest import MICRO, TINY


def test_round_trip_bitwise(tmp_path):
    model = SRNO(TINY, seed=3)
    opt = tr.Adam(model.params)
    opt.step(1e-3, {k: np.ones_like(p.data) for k, p in model.params.items()})
    rng = np.random.default_rng(9)
    rng.random(5)
    c = ckpt.Checkpoint.from_training(model, tr.TrainConfig(epochs=3, warmup_epochs=1), opt, rng, 7)
    ckpt.save(tmp_path / "a.ckpt", c)
    back = ckpt.load(tmp_path / "a.ckpt")
    assert back.tensors.keys() == c.tensors.keys()
    for k, v in c.tensors.items():
        assert back.tensors[k].dtype == np.float32
        assert back.tensors[k].tobytes() == np.asarray(v, np.float32).tobytes()
    assert back.model_cfg == c.model_cfg and back.train_cfg == c.train_cfg
    assert back.rng_state == c.rng_state and back.step == 7
    ckpt.save(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_layout_and_payload_size(tmp_path):
    model = SRNO(MICRO)
    path = model.save(tmp_path / "m.ckpt")
    raw = path.read_bytes()
    assert raw[:4] == b"SRNO"
    assert struct.unpack("<I", raw[4:8])[0] == ckpt.VERSION
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["model_cfg"]["d_z"] == MICRO.d_z
    assert header["rgb_mean"] == [0.5, 0.5, 0.5]
    n_scalars = op.param_count(MICRO)
    names = model.params.keys()
    overhead = 16 + hlen + 4 + sum(4 + len(n.encode()) + 4 + 8 * model.params[n].ndim for n in names)
    assert len(raw) == overhead + 4 * n_scalars
    assert ckpt.payload_scalars(path) == n_scalars


@pytest.mark.parametrize("cfg", [MICRO, TINY, op.SrnoConfig()])
def test_param_count_equals_serialized_scalars(cfg, tmp_path):
    path = SRNO(cfg).save(tmp_path / "x.ckpt")
    assert ckpt.payload_scalars(path) == op.param_count(cfg)


def test_truncated_and_bad_magic(tmp_path):
    path = SRNO(MICRO).save(tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for cut in [3, 10, 40, len(raw) - 1]:
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            ckpt.load(tmp_path / "t.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.load(tmp_path / "bad.ckpt")
    (tmp_path / "extra.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        ckpt.load(tmp_path / "extra.ckpt")
    with pytest.raises(CheckpointError):
        ckpt.load(tmp_path / "nope.ckpt")


def test_missing_or_misshaped_parameter(tmp_path):
    c = ckpt.Checkpoint.from_model(SRNO(MICRO))
    del c.tensors["lift.bias"]
    ckpt.save(tmp_path / "m.ckpt", c)
    with pytest.raises(CheckpointError, match="lift.bias"):
        ckpt.load(tmp_path / "m.ckpt")
    c = ckpt.Checkpoint.from_model(SRNO(MICRO))
    c.tensors["lift.bias"] = np.zeros(3, np.float32)
    ckpt.save(tmp_path / "s.ckpt", c)
    with pytest.raises(CheckpointError, match="shape"):
        ckpt.load(tmp_path / "s.ckpt")


def test_model_reload_predicts_identically(tmp_path, rng):
    m = SRNO(TINY, seed=4)
    lr = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
    a = m.predict(lr, 16, 16).pixels
    b = SRNO.from_checkpoint(m.save(tmp_path / "m.ckpt")).predict(lr, 16, 16).pixels
    assert a.tobytes() == b.tobytes()


def test_empty_config_is_paper_default():
    m, t = config_from_dict({})
    assert (m.d_z, m.n_heads, m.T, m.encoder.d_e, m.encoder.n_blocks) == (256, 16, 2, 64, 16)
    assert (t.lr_max, t.lr_init, t.epochs, t.batch_size, t.warmup_epochs) == (4e-4, 4e-5, 1000, 64, 50)
    assert (t.patch_size, t.n_query) == (128, 128 ** 2)


def test_desk_and_file_config(tmp_path):
    (tmp_path / "c.json").write_text('{"d_z": 64, "n_heads": 4}')
    m, _ = parse_config(tmp_path / "c.json")
    assert (m.d_z, m.n_heads) == (64, 4)
    m, t = desk_config()
    assert (m.encoder.d_e, m.encoder.n_blocks, m.d_z, m.n_heads, m.T) == (32, 4, 64, 4, 2)
    assert (t.patch_size, t.n_query, t.batch_size) == (48, 48 * 48, 8)


@pytest.mark.parametrize("raw,key", [
    ({"d_z": 100, "n_heads": 16}, "n_heads"),
    ({"d_zz": 64}, "d_zz"),
    ({"T": 1.5}, "T"),
    ({"out_proj": 1}, "out_proj"),
    ({"lr_max": "big"}, "lr_max"),
    ({"lr_init": 1e-3}, "lr_init"),
])
def test_invalid_config_names_key(raw, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == key


def test_malformed_json(tmp_path):
    (tmp_path / "c.json").write_text('{"d_z": 64,}')
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "c.json")
    (tmp_path / "d.json").write_text('{"d_z": 64} // no comments')
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "d.json")


def test_model_config_dict_round_trip():
    from srno.config import model_config_from_dict

    for cfg in [MICRO, TINY, op.SrnoConfig(swap_kv=True, out_proj=False)]:
        assert model_config_from_dict(model_config_dict(cfg)) == cfg
