import csv
import math

import numpy as np
import pytest

from srno import checkpoint as ckpt
from srno import data
from srno import operator as op
from srno import tensor as T
from srno import train as tr
from srno.config import config_from_dict
from srno.errors import ConfigError, NumericError, ShapeError
from srno.model import SRNO

from conftest import MICRO, rand_image


def test_l1_values():
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert float(tr.l1_loss(T.Tensor(x), x).data) == 0.0
    np.testing.assert_allclose(float(tr.l1_loss(T.Tensor(x + 0.5), x).data), 0.5, rtol=1e-6)
    with pytest.raises(ShapeError):
        tr.l1_loss(T.Tensor(np.zeros((4, 3))), np.zeros((5, 3)))


def test_l1_gradient_is_sign_over_count(rng):
    q = 7
    pred = T.Tensor(rng.standard_normal((q, 3)), dtype=np.float64)
    target = rng.standard_normal((q, 3))
    pred.requires_grad = True
    with T.Tape() as tape:
        tape.backward(tr.l1_loss(pred, target))
    np.testing.assert_allclose(pred.grad, np.sign(pred.data - target) / (3 * q), rtol=1e-15)
    err = T.grad_check(lambda: tr.l1_loss(pred, target), [pred])
    assert err < 1e-6


CFG = tr.TrainConfig(epochs=1000, warmup_epochs=50)


def test_lr_schedule_examples():
    assert tr.lr_schedule(0, CFG) == pytest.approx(4e-5, rel=1e-12)
    assert tr.lr_schedule(50, CFG) == pytest.approx(4e-4, rel=1e-12)
    assert tr.lr_schedule(1000, CFG) == pytest.approx(0.0, abs=1e-20)
    assert tr.lr_schedule(50 + 950 / 2, CFG) == pytest.approx(2e-4, rel=1e-12)
    assert tr.lr_schedule(25, CFG) == pytest.approx((4e-5 + 4e-4) / 2, rel=1e-12)


def test_lr_schedule_continuous():
    e = np.linspace(0, 1000, 200_001)
    lr = np.array([tr.lr_schedule(v, CFG) for v in e])
    assert np.max(np.abs(np.diff(lr))) < 1e-7
    assert abs(tr.lr_schedule(50 - 1e-9, CFG) - tr.lr_schedule(50 + 1e-9, CFG)) < 1e-12


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(lr_init=1e-3, lr_max=1e-4)
    with pytest.raises(ConfigError):
        tr.TrainConfig(epochs=10, warmup_epochs=10)
    with pytest.raises(ConfigError):
        tr.TrainConfig(sample_mode="spiral")


def test_adam_first_step_moves_by_lr():
    p = {"w": T.Tensor([0.3], dtype=np.float64)}
    opt = tr.Adam(p)
    tr.adam_step(p, {"w": np.array([1.0])}, opt, lr=1e-3)
    # m_hat = 1, v_hat = 1: the step is lr / (1 + eps)
    np.testing.assert_allclose(p["w"].data - 0.3, [-1e-3], rtol=1e-7)
    np.testing.assert_allclose(p["w"].data, [0.3 - 1e-3 / (1 + 1e-8)], rtol=0, atol=1e-15)
    assert opt.step_count == 1


def test_adam_zero_grads_from_fresh_state_leave_params_bitwise():
    p = {"w": T.Tensor(np.random.default_rng(0).standard_normal(5))}
    before = p["w"].data.tobytes()
    opt = tr.Adam(p)
    opt.step(1e-2, {"w": np.zeros(5, np.float32)})
    assert p["w"].data.tobytes() == before
    assert opt.step_count == 1


def test_adam_zero_grads_decay_moments():
    p = {"w": T.Tensor([1.0, -2.0], dtype=np.float64)}
    opt = tr.Adam(p)
    opt.step(1e-3, {"w": np.array([0.5, -1.0])})
    m, v = opt.m["w"].copy(), opt.v["w"].copy()
    opt.step(1e-3, {"w": np.zeros(2)})
    np.testing.assert_allclose(opt.m["w"], 0.9 * m, rtol=1e-15)
    np.testing.assert_allclose(opt.v["w"], 0.999 * v, rtol=1e-15)


def test_adam_rejects_non_finite_with_name():
    p = {"a": T.Tensor([1.0]), "bad.weight": T.Tensor([2.0])}
    opt = tr.Adam(p)
    with pytest.raises(NumericError, match="bad.weight"):
        opt.step(1e-3, {"a": np.array([1.0], np.float32), "bad.weight": np.array([np.nan], np.float32)})
    assert p["a"].data[0] == 1.0 and opt.step_count == 0


def tiny_setup(rng, **kw):
    model_cfg = {"d_e": 4, "n_blocks": 1, "d_z": 8, "n_heads": 2, "T": 1, "d_ffn": 8}
    train_cfg = {"epochs": 2, "steps_per_epoch": 10, "batch_size": 2, "patch_size": 8, "n_query": 32,
                 "warmup_epochs": 1, "checkpoint_every": 1, "seed": 5}
    train_cfg.update(kw)
    mcfg, tcfg = config_from_dict({**model_cfg, **train_cfg})
    ds = [rand_image(rng, 40, 40), rand_image(rng, 36, 44)]
    return mcfg, tcfg, ds


def read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_smoke_run_writes_log_and_loadable_checkpoints(tmp_path, rng):
    mcfg, tcfg, ds = tiny_setup(rng)
    last = tr.train(SRNO(mcfg), tcfg, ds, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["step"] for r in rows] == [str(i) for i in range(1, 21)]
    assert list(rows[0]) == ["epoch", "step", "loss", "lr"]
    losses = [float(r["loss"]) for r in rows]
    assert all(math.isfinite(v) for v in losses)
    assert np.mean(losses[10:]) < np.mean(losses[:10])
    for name in ["epoch0001.ckpt", "epoch0002.ckpt", "last.ckpt"]:
        state = ckpt.load(tmp_path / name)
        assert state.step == (10 if name == "epoch0001.ckpt" else 20)
    m = SRNO.from_checkpoint(last)
    assert m.num_params() == op.param_count(mcfg)


def test_training_is_reproducible(tmp_path, rng):
    mcfg, tcfg, ds = tiny_setup(rng)
    a = SRNO(mcfg, seed=1)
    b = SRNO(mcfg, seed=1)
    tr.train(a, tcfg, ds, tmp_path / "a")
    tr.train(b, tcfg, ds, tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_resume_matches_unbroken_run(tmp_path, rng):
    mcfg, tcfg, ds = tiny_setup(rng, epochs=3)
    tr.train(SRNO(mcfg, seed=2), tcfg, ds, tmp_path / "full")
    tr.train(SRNO(mcfg, seed=2), tcfg, ds, tmp_path / "part", max_steps=10)
    tr.train(SRNO(mcfg, seed=99), tcfg, ds, tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    full = read_metrics(tmp_path / "full/metrics.csv")
    part = read_metrics(tmp_path / "part/metrics.csv")
    assert len(part) == len(full) == 30
    assert abs(float(full[10]["loss"]) - float(part[10]["loss"])) < 1e-6
    assert [r["loss"] for r in full] == [r["loss"] for r in part]


def test_sequential_mode_trains(tmp_path, rng):
    mcfg, tcfg, ds = tiny_setup(rng, sample_mode="sequential", epochs=1, warmup_epochs=0)
    tr.train(SRNO(mcfg), tcfg, ds, tmp_path)
    assert len(read_metrics(tmp_path / "metrics.csv")) == 10


def test_validation_log(tmp_path, rng):
    mcfg, tcfg, ds = tiny_setup(rng, val_every=1, val_scales=[2, 3])
    tr.train(SRNO(mcfg), tcfg, ds, tmp_path, val_set=[rand_image(rng, 24, 24)])
    rows = read_metrics(tmp_path / "val.csv")
    assert [(r["epoch"], r["scale"]) for r in rows] == [("1", "2.0"), ("1", "3.0"), ("2", "2.0"), ("2", "3.0")]


def test_single_image_overfit_halves_loss(tmp_path):
    # desk-sized model, all pixels of every patch supervised
    mcfg, tcfg = config_from_dict({
        "d_e": 32, "n_blocks": 4, "d_z": 64, "n_heads": 4, "T": 2, "d_ffn": 64,
        "patch_size": 24, "n_query": 24 * 24, "batch_size": 4,
        "epochs": 5, "steps_per_epoch": 100, "warmup_epochs": 0.5, "lr_init": 1e-4, "lr_max": 1e-3,
        "checkpoint_every": 0, "seed": 0})
    yy, xx = np.mgrid[0:96, 0:96] / 96.0
    img = data.ImageRGB(np.stack([0.5 + 0.4 * np.sin(6 * xx + 3 * yy), 0.5 + 0.3 * np.cos(5 * yy),
                                  0.2 + 0.6 * xx * yy]).astype(np.float32))
    tr.train(SRNO(mcfg), tcfg, [img], tmp_path)
    losses = np.array([float(r["loss"]) for r in read_metrics(tmp_path / "metrics.csv")])
    assert len(losses) == 500
    assert losses[-50:].mean() <= 0.5 * losses[:10].mean()
