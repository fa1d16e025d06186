"""Stateful wrapper bundling a config, named parameters and the RGB mean."""

from __future__ import annotations

import numpy as np

from . import checkpoint as ckpt
from . import data
from . import operator as op
from . import tensor as T
from .errors import CheckpointError

DEFAULT_CHUNK = 1 << 16


class SRNO:
    def __init__(self, cfg: op.SrnoConfig = op.DESK_CONFIG, params: dict | None = None,
                 seed: int = 0, rgb_mean=data.RGB_MEAN, dtype=np.float32):
        self.cfg = cfg
        self.rgb_mean = tuple(float(m) for m in rgb_mean)
        if params is None:
            params = op.init_weights(cfg, data.make_rng(seed, worker=1), dtype=dtype)
        self.params = params

    @classmethod
    def from_checkpoint(cls, path_or_ckpt) -> "SRNO":
        from .config import model_config_from_dict

        state = path_or_ckpt if isinstance(path_or_ckpt, ckpt.Checkpoint) else ckpt.load(path_or_ckpt)
        cfg = model_config_from_dict(state.model_cfg)
        params = {k: T.Tensor(v, dtype=np.float32) for k, v in state.params.items()}
        return cls(cfg, params, rgb_mean=state.rgb_mean)

    def load_state(self, state: ckpt.Checkpoint):
        for name, p in self.params.items():
            if name not in state.tensors:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            p.data = np.array(state.tensors[name], dtype=p.dtype, copy=True)
        self.rgb_mean = tuple(state.rgb_mean)

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def save(self, path):
        return ckpt.save(path, ckpt.Checkpoint.from_model(self))

    def _shifted(self, lr_pixels) -> T.Tensor:
        px = lr_pixels.pixels if isinstance(lr_pixels, data.ImageRGB) else np.asarray(lr_pixels)
        m = np.asarray(self.rgb_mean, dtype=np.float32)[:, None, None]
        return T.Tensor(px.astype(np.float32) - m)

    def query(self, lr_pixels, q: op.QuerySet, chunk: int = DEFAULT_CHUNK, capture=None) -> np.ndarray:
        """RGB values in ``[0, 1]`` scale (not yet clamped) at the queried coordinates."""
        lr = self._shifted(lr_pixels)
        with T.no_tape():
            if capture is not None or len(q) <= chunk:
                out = op.forward(lr, q, self.cfg, self.params, capture=capture).data
            else:
                out = op.forward_chunked(lr, q, self.cfg, self.params, chunk)
        return out + np.asarray(self.rgb_mean, dtype=out.dtype)

    def predict(self, lr_img, out_h: int, out_w: int, tile: int | None = None,
                chunk: int = DEFAULT_CHUNK) -> data.ImageRGB:
        """Super-resolve to ``out_h x out_w``.

        With ``tile`` the HR grid is split into ``tile x tile`` blocks whose
        query sets are evaluated independently. Attention is global over a
        query set, so tiled output only approximates the untiled one unless
        a single tile covers the whole grid.
        """
        if out_h < 1 or out_w < 1:
            raise ValueError(f"predict: output size must be >= 1, got {out_h}x{out_w}")
        if tile is not None and tile < 1:
            raise ValueError(f"predict: tile must be >= 1, got {tile}")
        cell = np.array([2.0 / out_h, 2.0 / out_w])
        ys, xs = op.make_coord(out_h), op.make_coord(out_w)
        th = out_h if tile is None else min(tile, out_h)
        tw = out_w if tile is None else min(tile, out_w)
        out = np.empty((3, out_h, out_w), dtype=np.float32)
        for y0 in range(0, out_h, th):
            for x0 in range(0, out_w, tw):
                yy, xx = np.meshgrid(ys[y0:y0 + th], xs[x0:x0 + tw], indexing="ij")
                coords = np.stack([yy.ravel(), xx.ravel()], axis=-1)
                rgb = self.query(lr_img, op.QuerySet(coords, cell), chunk=chunk)
                out[:, y0:y0 + th, x0:x0 + tw] = rgb.T.reshape(3, *yy.shape)
        np.clip(out, 0.0, 1.0, out=out)
        return data.ImageRGB(out)


def upscale_size(h: int, w: int, scale: float) -> tuple[int, int]:
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))

