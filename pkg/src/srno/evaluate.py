"""PSNR benchmarking, runtime benchmarking and parameter/FLOP accounting."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data
from . import encoder as enc
from . import operator as op
from . import tensor as T

PSNR_CAP = 100.0


def psnr(pred, gt, border: int = 0) -> float:
    """PSNR in dB over RGB in ``[0, 1]`` after cropping ``border`` pixels per side."""
    a = pred.pixels if isinstance(pred, data.ImageRGB) else np.asarray(pred)
    b = gt.pixels if isinstance(gt, data.ImageRGB) else np.asarray(gt)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if border < 0 or 2 * border >= min(h, w):
        raise ValueError(f"psnr: border {border} too large for {h}x{w}")
    if border:
        a = a[..., border:h - border, border:w - border]
        b = b[..., border:h - border, border:w - border]
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def degrade(hr: data.ImageRGB, scale) -> tuple[data.ImageRGB, data.ImageRGB]:
    """(cropped HR, bicubic LR) for magnification ``scale`` (scalar or ``(r_y, r_x)``)."""
    ry, rx = (scale, scale) if np.isscalar(scale) else scale
    if ry <= 0 or rx <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h = max(1, int(math.floor(hr.height / ry + 1e-9)))
    w = max(1, int(math.floor(hr.width / rx + 1e-9)))
    H = min(hr.height, int(round(h * ry)))
    W = min(hr.width, int(round(w * rx)))
    crop = data.ImageRGB(hr.pixels[:, :H, :W])
    return crop, data.bicubic_resize(crop, h, w)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # per-image dicts
    params: int = 0
    flops: int = 0
    flops_queries: int = 128 * 128
    approximate: bool = False
    dataset: str = ""
    color_space: str = "RGB"

    def summary(self):
        out = []
        for scale in dict.fromkeys(r["scale"] for r in self.rows):
            rs = [r for r in self.rows if r["scale"] == scale]
            out.append({
                "dataset": self.dataset,
                "scale": scale,
                "images": len(rs),
                "psnr": float(np.mean([r["psnr"] for r in rs])),
                "bicubic_psnr": float(np.mean([r["bicubic_psnr"] for r in rs])),
                "ms": float(np.mean([r["ms"] for r in rs])),
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "scale", "images", "psnr", "bicubic_psnr", "gain", "ms", "approximate"])
        for s in self.summary():
            w.writerow([s["dataset"], _fmt_scale(s["scale"]), s["images"], f"{s['psnr']:.4f}",
                        f"{s['bicubic_psnr']:.4f}", f"{s['psnr'] - s['bicubic_psnr']:.4f}",
                        f"{s['ms']:.1f}", str(self.approximate).lower()])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"# PSNR on {self.color_space} in [0,1], border = ceil(scale)"
                 + ("  (tiled: approximate=true)" if self.approximate else ""),
                 f"# params {self.params:,}  FLOPs {self.flops / 1e9:.2f} G @ {self.flops_queries} queries",
                 f"{'dataset':<12}{'scale':>7}{'n':>4}{'SRNO':>10}{'bicubic':>10}{'gain':>8}{'ms':>10}"]
        for s in self.summary():
            lines.append(f"{s['dataset']:<12}{_fmt_scale(s['scale']):>7}{s['images']:>4}{s['psnr']:>10.3f}"
                         f"{s['bicubic_psnr']:>10.3f}{s['psnr'] - s['bicubic_psnr']:>+8.3f}{s['ms']:>10.1f}")
        return "\n".join(lines) + "\n"


def _fmt_scale(s):
    return f"{s:g}" if np.isscalar(s) else "x".join(f"{v:g}" for v in s)


def evaluate_images(model, images, scales, tile: int | None = None, names=None, dump_dir=None):
    """Per-image rows ``{image, scale, psnr, bicubic_psnr, ms}``."""
    rows = []
    names = names or [f"img{i:03d}" for i in range(len(images))]
    for scale in scales:
        if (np.isscalar(scale) and scale <= 1) or (not np.isscalar(scale) and min(scale) <= 1):
            raise ValueError(f"evaluate: scales must be > 1, got {scale}")
        border = int(math.ceil(scale if np.isscalar(scale) else max(scale)))
        for name, hr in zip(names, images):
            crop, lr = degrade(hr, scale)
            t0 = time.perf_counter()
            pred = model.predict(lr, crop.height, crop.width, tile=tile)
            ms = 1e3 * (time.perf_counter() - t0)
            base = data.bicubic_resize(lr, crop.height, crop.width)
            rows.append({"image": name, "scale": scale, "psnr": psnr(pred, crop, border),
                         "bicubic_psnr": psnr(base, crop, border), "ms": ms})
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                data.save_image(pred, Path(dump_dir) / f"{name}_x{_fmt_scale(scale)}.png")
    return rows


def evaluate(model, dataset_dir, scales, tile: int | None = None, dump_dir=None) -> EvalReport:
    paths = data.list_images(dataset_dir)
    if not paths:
        raise data.ImageIOError(f"{dataset_dir}: no PNG/PPM images found")
    images = [data.load_image(p) for p in paths]
    rows = evaluate_images(model, images, scales, tile=tile, names=[p.stem for p in paths],
                           dump_dir=dump_dir)
    params, flops = count_params_flops(model.cfg)
    return EvalReport(rows=rows, params=params, flops=flops, approximate=tile is not None,
                      dataset=Path(dataset_dir).name)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def operator_macs(cfg: op.SrnoConfig, n: int) -> int:
    """Multiply-adds of lifting, attention layers and projection at ``n`` queries."""
    d, f, hd = cfg.d_z, cfg.d_ffn, cfg.head_dim
    lift = n * cfg.lift_in * d
    qkv = 3 * n * d * d
    kv = n * d * hd          # K~^T V~ summed over heads
    apply = n * d * hd       # Q (K~^T V~)
    out = n * d * d if cfg.out_proj else 0
    ffn = 2 * n * d * f
    proj = n * (d * f + f * 3)
    return lift + cfg.T * (qkv + kv + apply + out + ffn) + proj


def count_params_flops(cfg: op.SrnoConfig, n_query: int = 128 * 128,
                       lr_size=(128, 128)) -> tuple[int, int]:
    """Closed-form ``(params, FLOPs)``; FLOPs are twice the multiply-adds.

    The encoder runs once on an ``lr_size`` input regardless of ``n_query``.
    """
    if n_query < 1:
        raise ValueError(f"n_query must be >= 1, got {n_query}")
    enc_macs = lr_size[0] * lr_size[1] * enc.macs_per_pixel(cfg.encoder)
    return op.param_count(cfg), 2 * (enc_macs + operator_macs(cfg, n_query))


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------

def _timed(fn, repeats):
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return ts


def attention_stage(z: T.Tensor, weights, cfg):
    state = op.LatentState(z)
    for t in range(cfg.T):
        state = op.attention_block(state, weights, cfg, t)
    return state.z


def bench_runtime(model, sizes, repeats: int = 5, lr_size=(48, 48), seed: int = 0):
    """Wall-times of the attention stage and the full forward at each query count.

    Each row holds ``median`` (of ``repeats``) and ``min3`` (fastest of the
    first three runs) in milliseconds; ``ratio`` is relative to the previous
    size's median attention time.
    """
    sizes = [int(n) for n in sizes]
    if not sizes or min(sizes) < 1:
        raise ValueError(f"bench_runtime: sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    lr = rng.uniform(0.0, 1.0, size=(3,) + tuple(lr_size)).astype(np.float32)
    rows = []
    prev = None
    with T.no_tape():
        for n in sizes:
            coords = rng.uniform(-1.0, 1.0, size=(n, 2))
            q = op.QuerySet(coords, np.array([2.0 / 256, 2.0 / 256]))
            z = T.Tensor(rng.standard_normal((n, model.cfg.d_z)), dtype=np.float32)
            attention_stage(z, model.params, model.cfg)  # warm-up
            att = _timed(lambda: attention_stage(z, model.params, model.cfg), repeats)
            full = _timed(lambda: model.query(lr, q), repeats)
            med = statistics.median(att)
            rows.append({"n": n, "attention_ms": 1e3 * med, "attention_min3_ms": 1e3 * min(att[:3]),
                         "forward_ms": 1e3 * statistics.median(full),
                         "forward_min3_ms": 1e3 * min(full[:3]),
                         "ratio": None if prev is None else med / prev})
            prev = med
    return rows


def format_bench(rows) -> str:
    lines = [f"{'n':>8}{'attn ms':>11}{'attn min3':>11}{'fwd ms':>11}{'fwd min3':>11}{'ratio':>8}"]
    for r in rows:
        ratio = "" if r["ratio"] is None else f"{r['ratio']:.2f}"
        lines.append(f"{r['n']:>8}{r['attention_ms']:>11.2f}{r['attention_min3_ms']:>11.2f}"
                     f"{r['forward_ms']:>11.2f}{r['forward_min3_ms']:>11.2f}{ratio:>8}")
    return "\n".join(lines) + "\n"
