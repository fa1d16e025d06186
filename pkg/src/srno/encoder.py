"""EDSR-baseline style feature encoder with the upsampler removed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    d_e: int = 64
    n_blocks: int = 16
    kernel: int = 3

    def __post_init__(self):
        if self.d_e < 1:
            raise ConfigError("d_e", f"must be >= 1, got {self.d_e}")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks", f"must be >= 0, got {self.n_blocks}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel", f"must be a positive odd integer, got {self.kernel}")


DESK_ENCODER = EncoderConfig(d_e=32, n_blocks=4)


@dataclass
class FeatureMap:
    """Encoder output: ``values`` is ``(d_e, H, W)`` or batched ``(N, d_e, H, W)``."""

    values: T.Tensor

    @property
    def channels(self):
        return self.values.shape[-3]

    @property
    def height(self):
        return self.values.shape[-2]

    @property
    def width(self):
        return self.values.shape[-1]


def _conv_names(cfg: EncoderConfig):
    names = [("encoder.head", 3, cfg.d_e)]
    for i in range(cfg.n_blocks):
        names.append((f"encoder.blocks.{i}.conv1", cfg.d_e, cfg.d_e))
        names.append((f"encoder.blocks.{i}.conv2", cfg.d_e, cfg.d_e))
    names.append(("encoder.tail", cfg.d_e, cfg.d_e))
    return names


def init_weights(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    # Kaiming-uniform over fan-in with the a=sqrt(5) leaky gain, i.e. bound
    # 1/sqrt(fan_in) (the usual framework default); zero biases.
    k = cfg.kernel
    params = {}
    for name, c_in, c_out in _conv_names(cfg):
        bound = 1.0 / np.sqrt(c_in * k * k)
        params[f"{name}.weight"] = T.Tensor(
            rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), dtype=dtype)
        params[f"{name}.bias"] = T.Tensor(np.zeros(c_out), dtype=dtype)
    return params


def param_count(cfg: EncoderConfig) -> int:
    k2 = cfg.kernel ** 2
    head = 3 * cfg.d_e * k2 + cfg.d_e
    conv = cfg.d_e * cfg.d_e * k2 + cfg.d_e
    return head + (2 * cfg.n_blocks + 1) * conv


def macs_per_pixel(cfg: EncoderConfig) -> int:
    k2 = cfg.kernel ** 2
    return 3 * cfg.d_e * k2 + (2 * cfg.n_blocks + 1) * cfg.d_e * cfg.d_e * k2


def encode(image: T.Tensor, cfg: EncoderConfig, weights: dict) -> FeatureMap:
    """Map a mean-shifted RGB grid to a ``d_e``-channel grid of the same size.

    head conv -> ``n_blocks`` x (conv, ReLU, conv, + identity) -> tail conv,
    plus a global skip from the head output.
    """
    image = T._t(image)
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"encode: expected (N,)3,H,W image, got {image.shape}")
    k = cfg.kernel
    if image.shape[-1] < k or image.shape[-2] < k:
        raise ShapeError(f"encode: image {image.shape} smaller than the {k}x{k} kernel support")
    pad = (k - 1) // 2

    def conv(x, name):
        return T.conv2d(x, weights[f"{name}.weight"], weights[f"{name}.bias"], pad=pad)

    head = conv(image, "encoder.head")
    x = head
    for i in range(cfg.n_blocks):
        r = T.relu(conv(x, f"encoder.blocks.{i}.conv1"))
        x = T.add(x, conv(r, f"encoder.blocks.{i}.conv2"))
    x = T.add(conv(x, "encoder.tail"), head)
    return FeatureMap(x)
