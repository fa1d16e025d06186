"""Self-contained binary checkpoint format.

Layout (all integers little-endian)::

    b"SRNO"                    magic
    u32                        format version
    u64, bytes                 length-prefixed UTF-8 JSON header
    u32                        number of tensors
    per tensor:
        u32, bytes             length-prefixed UTF-8 name
        u32                    ndim
        u64 * ndim             dims
        f32 * prod(dims)       payload

The JSON header holds the model and training configs, RNG state, epoch,
step and the RGB mean used for input shifting. Optimizer moments are stored
as ordinary tensors whose names start with :data:`OPT_PREFIX`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SRNO"
VERSION = 1
OPT_PREFIX = "__adam."


@dataclass
class Checkpoint:
    model_cfg: dict
    tensors: dict
    train_cfg: dict | None = None
    rng_state: dict | None = None
    epoch: int = 0
    step: int = 0
    rgb_mean: tuple = (0.5, 0.5, 0.5)
    extra: dict = field(default_factory=dict)

    @property
    def params(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith(OPT_PREFIX)}

    @classmethod
    def from_model(cls, model):
        from .config import model_config_dict

        return cls(model_cfg=model_config_dict(model.cfg),
                   tensors={k: p.data for k, p in model.params.items()},
                   rgb_mean=tuple(model.rgb_mean))

    @classmethod
    def from_training(cls, model, train_cfg, optimizer, rng, step):
        from .train import config_dict

        c = cls.from_model(model)
        c.tensors.update(optimizer.state_tensors())
        c.train_cfg = config_dict(train_cfg)
        c.rng_state = rng.bit_generator.state
        c.step = int(step)
        c.epoch = int(step // train_cfg.steps_per_epoch)
        return c


def save(path, checkpoint: Checkpoint):
    header = {
        "model_cfg": checkpoint.model_cfg,
        "train_cfg": checkpoint.train_cfg,
        "rng_state": checkpoint.rng_state,
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "rgb_mean": list(checkpoint.rgb_mean),
        "extra": checkpoint.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(checkpoint.tensors))]
    for name, arr in checkpoint.tensors.items():
        arr = np.asarray(arr)
        if arr.ndim == 0:
            raise CheckpointError(f"tensor {name!r}: scalars are not supported")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc.strerror})") from exc
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an SRNO checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q")
        size = int(np.prod(dims))
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    ck = Checkpoint(model_cfg=header["model_cfg"], tensors=tensors, train_cfg=header.get("train_cfg"),
                    rng_state=header.get("rng_state"), epoch=header.get("epoch", 0),
                    step=header.get("step", 0), rgb_mean=tuple(header.get("rgb_mean", (0.5,) * 3)),
                    extra=header.get("extra") or {})
    _validate(ck, path)
    return ck


def _validate(ck: Checkpoint, path):
    from . import encoder as enc
    from . import operator as op
    from .config import model_config_from_dict

    cfg = model_config_from_dict(ck.model_cfg)
    expected = {}
    for name, c_in, c_out in enc._conv_names(cfg.encoder):
        k = cfg.encoder.kernel
        expected[f"{name}.weight"] = (c_out, c_in, k, k)
        expected[f"{name}.bias"] = (c_out,)
    expected.update(op.operator_shapes(cfg))
    params = ck.params
    missing = sorted(set(expected) - set(params))
    unknown = sorted(set(params) - set(expected))
    if missing or unknown:
        raise CheckpointError(f"{path}: parameter names disagree with config "
                              f"(missing {missing[:3]}, unexpected {unknown[:3]})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, config implies {shape}")


def payload_scalars(path) -> int:
    """Number of model-parameter scalars stored in a checkpoint file."""
    return int(sum(v.size for v in load(path).params.values()))
