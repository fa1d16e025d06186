"""L1 training with Adam under a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data
from . import operator as op
from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    steps_per_epoch: int = 100
    batch_size: int = 64
    lr_init: float = 4e-5
    lr_max: float = 4e-4
    warmup_epochs: float = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 50
    patch_size: int = 128
    n_query: int = 128 * 128
    sample_mode: str = "random"
    val_every: int = 0
    val_scales: tuple = (2.0, 3.0, 4.0)

    def __post_init__(self):
        if not 0 < self.lr_init <= self.lr_max:
            raise ConfigError("lr_init", f"need 0 < lr_init <= lr_max, got {self.lr_init}, {self.lr_max}")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs", f"must lie in [0, epochs), got {self.warmup_epochs}")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.sample_mode not in ("random", "sequential"):
            raise ConfigError("sample_mode", f"must be 'random' or 'sequential', got {self.sample_mode!r}")
        if self.n_query > self.patch_size ** 2:
            raise ConfigError("n_query", "cannot exceed patch_size**2 (the smallest HR crop)")
        if self.checkpoint_every < 0 or self.val_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")


def l1_loss(pred, target) -> T.Tensor:
    """Mean absolute error over every element."""
    pred = T._t(pred)
    target = T._t(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return T.mean_all(T.absolute(T.sub(pred, target)))


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup ``lr_init -> lr_max``, then cosine decay to zero at ``epochs``."""
    epoch = min(max(epoch, 0.0), float(cfg.epochs))
    w = cfg.warmup_epochs
    if w > 0 and epoch <= w:
        return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * epoch / w
    frac = (epoch - w) / (cfg.epochs - w)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Bias-corrected Adam over a dict of named parameters."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, grads: dict | None = None):
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            dt = p.dtype.type
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data -= dt(lr) * update

    def state_tensors(self) -> dict:
        out = {}
        for k in self.params:
            out[f"{ckpt.OPT_PREFIX}m.{k}"] = self.m[k]
            out[f"{ckpt.OPT_PREFIX}v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict, step: int):
        for k in self.params:
            self.m[k] = np.array(tensors[f"{ckpt.OPT_PREFIX}m.{k}"], copy=True)
            self.v[k] = np.array(tensors[f"{ckpt.OPT_PREFIX}v.{k}"], copy=True)
        self.step_count = int(step)


def adam_step(params: dict, grads: dict, state: Adam, lr: float):
    state.step(lr, grads)
    return params, state


def train_step(model, batch, optimizer: Adam, lr: float) -> float:
    """One forward/backward/update on a list of :class:`TrainSample`."""
    lr_arr, coords, cell, target = data.collate(batch, model.rgb_mean)
    for p in model.params.values():
        p.requires_grad = True
        p.grad = None
    with T.Tape() as tape:
        pred = op.forward(T.Tensor(lr_arr), op.QuerySet(coords, cell), model.cfg, model.params)
        loss = l1_loss(pred, target)
        tape.backward(loss)
    optimizer.step(lr)
    for p in model.params.values():
        p.grad = None
    return float(loss.data)


def train(model, train_cfg: TrainConfig, dataset, out_dir, val_set=None, resume=None,
          max_steps: int | None = None, progress=None):
    """Run (or resume) training, writing ``metrics.csv`` and checkpoints to ``out_dir``.

    ``model`` is a :class:`srno.model.SRNO`. Returns the final checkpoint path.
    ``max_steps`` stops early after that many global steps (still checkpointing),
    which the resume tests use.
    """
    from .evaluate import evaluate_images

    if not dataset:
        raise ValueError("train: empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    val_path = out_dir / "val.csv"

    optimizer = Adam(model.params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    rng = data.make_rng(train_cfg.seed)
    step = 0
    if resume is not None:
        state = ckpt.load(resume)
        model.load_state(state)
        optimizer.load_state(state.tensors, state.step)
        rng.bit_generator.state = state.rng_state
        step = state.step
    else:
        with metrics_path.open("w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "step", "loss", "lr"])

    total = train_cfg.epochs * train_cfg.steps_per_epoch
    stop = total if max_steps is None else min(total, max_steps)
    spe = train_cfg.steps_per_epoch
    last_path = None

    def save(tag):
        path = out_dir / f"{tag}.ckpt"
        ckpt.save(path, ckpt.Checkpoint.from_training(model, train_cfg, optimizer, rng, step))
        return path

    t0 = time.perf_counter()
    with metrics_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        while step < stop:
            epoch = step // spe
            lr = lr_schedule(step / spe, train_cfg)
            batch = data.sample_batch(dataset, train_cfg.batch_size, train_cfg.patch_size,
                                      train_cfg.n_query, train_cfg.sample_mode, rng)
            loss = train_step(model, batch, optimizer, lr)
            step += 1
            writer.writerow([epoch, step, repr(loss), repr(lr)])
            if progress is not None:
                progress(step, loss, lr)
            if step % spe == 0:
                fh.flush()
                done_epoch = step // spe
                log.info("epoch %d step %d loss %.5f lr %.2e (%.1fs)", done_epoch, step, loss, lr,
                         time.perf_counter() - t0)
                if val_set and train_cfg.val_every and done_epoch % train_cfg.val_every == 0:
                    rows = evaluate_images(model, val_set, train_cfg.val_scales)
                    _append_val(val_path, done_epoch, rows)
                if train_cfg.checkpoint_every and done_epoch % train_cfg.checkpoint_every == 0:
                    last_path = save(f"epoch{done_epoch:04d}")
    last_path = save("last")
    return last_path


def _append_val(path: Path, epoch: int, rows):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "scale", "psnr", "bicubic_psnr"])
        for scale in dict.fromkeys(r["scale"] for r in rows):
            rs = [r for r in rows if r["scale"] == scale]
            w.writerow([epoch, scale, f"{np.mean([r['psnr'] for r in rs]):.4f}",
                        f"{np.mean([r['bicubic_psnr'] for r in rs]):.4f}"])


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["val_scales"] = list(cfg.val_scales)
    return d
