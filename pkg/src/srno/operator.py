"""The neural operator: lifting, Galerkin-type attention layers, projection.

Coordinates live in the normalized square ``[-1, 1]^2`` and are ordered
``(y, x)``. A query set carries, besides the coordinates, the size of one
target pixel in the same normalized units (``2/H_out, 2/W_out``).

Inside the lifting step offsets and cell sizes are re-expressed in units
where one low-resolution pixel measures 2, which turns the cell into
``(2/r_y, 2/r_x)`` for a magnification ``r`` and makes the lifting input
independent of the absolute image size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SrnoConfig:
    d_z: int = 256
    n_heads: int = 16
    T: int = 2
    d_ffn: int = 256
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    out_proj: bool = True
    swap_kv: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_z < 1:
            raise ConfigError("d_z", f"must be >= 1, got {self.d_z}")
        if self.n_heads < 1 or self.d_z % self.n_heads:
            raise ConfigError("n_heads", f"d_z={self.d_z} is not divisible by n_heads={self.n_heads}")
        if self.T < 1:
            raise ConfigError("T", f"must be >= 1, got {self.T}")
        if self.d_ffn < 1:
            raise ConfigError("d_ffn", f"must be >= 1, got {self.d_ffn}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps", "must be positive")

    @property
    def head_dim(self):
        return self.d_z // self.n_heads

    @property
    def lift_in(self):
        return 4 * (self.encoder.d_e + 2) + 2


DESK_CONFIG = SrnoConfig(d_z=64, n_heads=4, T=2, d_ffn=64, encoder=enc.DESK_ENCODER)


@dataclass
class QuerySet:
    """Target coordinates ``(.., n, 2)`` plus cell size ``(.., 2)`` or ``(.., n, 2)``."""

    coords: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.cell = np.asarray(self.cell, dtype=np.float64)
        if self.coords.ndim not in (2, 3) or self.coords.shape[-1] != 2:
            raise ShapeError(f"QuerySet: coords must be (..., n, 2), got {self.coords.shape}")
        if self.coords.shape[-2] == 0:
            raise ValueError("QuerySet: empty query set")
        if np.any(np.abs(self.coords) > 1.0):
            raise ValueError("QuerySet: coordinates must lie in [-1, 1]")
        if np.any(self.cell <= 0) or np.any(self.cell > 2):
            raise ValueError("QuerySet: cell components must lie in (0, 2]")

    def __len__(self):
        return self.coords.shape[-2]


@dataclass
class LatentState:
    z: T.Tensor


def make_coord(n: int) -> np.ndarray:
    """Pixel-center coordinates of an ``n``-cell partition of ``[-1, 1]``."""
    if n < 1:
        raise ValueError(f"make_coord: n must be >= 1, got {n}")
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def grid_coords(h: int, w: int) -> np.ndarray:
    """All pixel centers of an ``h x w`` grid in raster order, shape ``(h*w, 2)``."""
    yy, xx = np.meshgrid(make_coord(h), make_coord(w), indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=-1)


def grid_queries(h: int, w: int) -> QuerySet:
    return QuerySet(grid_coords(h, w), np.array([2.0 / h, 2.0 / w]))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _layer_shapes(cfg: SrnoConfig, t: int):
    p = f"layers.{t}"
    d, H, hd = cfg.d_z, cfg.n_heads, cfg.head_dim
    shapes = {}
    for role in ("q", "k", "v"):
        shapes[f"{p}.attn.{role}.weight"] = (d, d)
        shapes[f"{p}.attn.{role}.bias"] = (d,)
    for norm in ("k_norm", "v_norm"):
        shapes[f"{p}.attn.{norm}.gamma"] = (H, hd)
        shapes[f"{p}.attn.{norm}.beta"] = (H, hd)
    if cfg.out_proj:
        shapes[f"{p}.attn.out.weight"] = (d, d)
        shapes[f"{p}.attn.out.bias"] = (d,)
    shapes[f"{p}.ffn.fc1.weight"] = (d, cfg.d_ffn)
    shapes[f"{p}.ffn.fc1.bias"] = (cfg.d_ffn,)
    shapes[f"{p}.ffn.fc2.weight"] = (cfg.d_ffn, d)
    shapes[f"{p}.ffn.fc2.bias"] = (d,)
    return shapes


def operator_shapes(cfg: SrnoConfig) -> dict:
    shapes = {"lift.weight": (cfg.lift_in, cfg.d_z), "lift.bias": (cfg.d_z,)}
    for t in range(cfg.T):
        shapes.update(_layer_shapes(cfg, t))
    shapes["proj.fc1.weight"] = (cfg.d_z, cfg.d_ffn)
    shapes["proj.fc1.bias"] = (cfg.d_ffn,)
    shapes["proj.fc2.weight"] = (cfg.d_ffn, 3)
    shapes["proj.fc2.bias"] = (3,)
    return shapes


def init_weights(cfg: SrnoConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Encoder plus operator parameters, keyed by dotted name."""
    params = enc.init_weights(cfg.encoder, rng, dtype=dtype)
    for name, shape in operator_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = T.Tensor(arr, dtype=dtype)
    return params


def param_count(cfg: SrnoConfig) -> int:
    """Closed-form parameter count (kept independent of ``init_weights``)."""
    d, f, H = cfg.d_z, cfg.d_ffn, cfg.n_heads
    lift = cfg.lift_in * d + d
    attn = 3 * (d * d + d) + 2 * 2 * H * cfg.head_dim
    if cfg.out_proj:
        attn += d * d + d
    ffn = d * f + f + f * d + d
    proj = d * f + f + f * 3 + 3
    return enc.param_count(cfg.encoder) + lift + cfg.T * (attn + ffn) + proj


# ---------------------------------------------------------------------------
# lifting
# ---------------------------------------------------------------------------

def lift_geometry(coords: np.ndarray, h: int, w: int):
    """Four-neighbour lookup of continuous queries on an ``h x w`` grid.

    Returns ``(index, s, delta)``: flat grid indices ``(.., n, 4)``, bilinear
    weights ``(.., n, 4)`` summing to one, and offsets ``x - x_hat``
    ``(.., n, 4, 2)`` in normalized units. Neighbour order is
    ``(y0,x0), (y0,x1), (y1,x0), (y1,x1)``; indices are clamped at the border
    while offsets are measured against the clamped neighbour's own center.
    """
    coords = np.asarray(coords, dtype=np.float64)
    uy = (coords[..., 0] + 1.0) * (h / 2.0) - 0.5
    ux = (coords[..., 1] + 1.0) * (w / 2.0) - 0.5
    fy0 = np.floor(uy)
    fx0 = np.floor(ux)
    ty = uy - fy0
    tx = ux - fx0
    y0 = np.clip(fy0.astype(np.int64), 0, h - 1)
    y1 = np.clip(fy0.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(fx0.astype(np.int64), 0, w - 1)
    x1 = np.clip(fx0.astype(np.int64) + 1, 0, w - 1)

    ys = np.stack([y0, y0, y1, y1], axis=-1)
    xs = np.stack([x0, x1, x0, x1], axis=-1)
    wy = np.stack([1.0 - ty, 1.0 - ty, ty, ty], axis=-1)
    wx = np.stack([1.0 - tx, tx, 1.0 - tx, tx], axis=-1)
    s = wy * wx
    index = ys * w + xs
    cy = -1.0 + (2.0 * ys + 1.0) / h
    cx = -1.0 + (2.0 * xs + 1.0) / w
    delta = np.stack([coords[..., None, 0] - cy, coords[..., None, 1] - cx], axis=-1)
    return index, s, delta


def _batched(q: QuerySet, batch: int):
    coords = q.coords if q.coords.ndim == 3 else q.coords[None]
    if coords.shape[0] != batch:
        if coords.shape[0] == 1:
            coords = np.broadcast_to(coords, (batch,) + coords.shape[1:])
        else:
            raise ShapeError(f"QuerySet batch {coords.shape[0]} does not match feature batch {batch}")
    n = coords.shape[1]
    cell = q.cell
    if cell.ndim == 1:
        cell = np.broadcast_to(cell, (batch, n, 2))
    elif cell.ndim == 2 and q.coords.ndim == 3:
        cell = np.broadcast_to(cell[:, None, :], (batch, n, 2))
    elif cell.ndim == 2:
        cell = np.broadcast_to(cell[None], (batch, n, 2))
    return coords, cell


def lift(features: enc.FeatureMap, q: QuerySet, weights: dict) -> LatentState:
    """Build ``z_0`` from bilinearly weighted neighbour features, offsets and cell."""
    fm = features.values
    squeeze = fm.ndim == 3
    if squeeze:
        fm = T.reshape(fm, (1,) + fm.shape)
    b, d_e, h, w = fm.shape
    coords, cell = _batched(q, b)
    n = coords.shape[1]
    dtype = fm.dtype

    index, s, delta = lift_geometry(coords, h, w)
    grid_scale = np.array([h, w], dtype=np.float64)
    flat = T.reshape(T.transpose(fm, (0, 2, 3, 1)), (b, h * w, d_e))
    nb = T.gather_rows(flat, index.reshape(b, n * 4))
    nb = T.reshape(nb, (b, n, 4, d_e))
    weighted = T.mul(nb, np.broadcast_to(s[..., None], (b, n, 4, d_e)).astype(dtype))
    offsets = T.Tensor(delta * grid_scale, dtype=dtype)
    local = T.reshape(T.concat([weighted, offsets], axis=-1), (b, n, 4 * (d_e + 2)))
    cell_t = T.Tensor(cell * grid_scale, dtype=dtype)
    inp = T.concat([local, cell_t], axis=-1)
    z = T.linear(inp, weights["lift.weight"], weights["lift.bias"])
    if squeeze:
        z = T.reshape(z, (n, z.shape[-1]))
    return LatentState(z)


# ---------------------------------------------------------------------------
# Galerkin-type attention
# ---------------------------------------------------------------------------

def _heads(z, weights, prefix, cfg):
    """Project to per-head Q, normalized K and V, each ``(B, H, n, d)``."""
    b, n, _ = z.shape
    H, hd = cfg.n_heads, cfg.head_dim

    def proj(role):
        x = T.linear(z, weights[f"{prefix}.{role}.weight"], weights[f"{prefix}.{role}.bias"])
        return T.reshape(x, (b, n, H, hd))

    q = proj("q")
    k = T.layer_norm(proj("k"), weights[f"{prefix}.k_norm.gamma"],
                     weights[f"{prefix}.k_norm.beta"], cfg.ln_eps)
    v = T.layer_norm(proj("v"), weights[f"{prefix}.v_norm.gamma"],
                     weights[f"{prefix}.v_norm.beta"], cfg.ln_eps)
    perm = (0, 2, 1, 3)
    return T.transpose(q, perm), T.transpose(k, perm), T.transpose(v, perm)


def _kv_product(k, v, cfg):
    kt = (0, 1, 3, 2)
    if cfg.swap_kv:
        return T.matmul(T.transpose(v, kt), k)
    return T.matmul(T.transpose(k, kt), v)


def galerkin_attention(z: T.Tensor, weights: dict, cfg: SrnoConfig, layer: int = 0,
                       kv: T.Tensor | None = None, capture: dict | None = None) -> T.Tensor:
    """Multi-head ``Q (K~^T V~) / n`` on ``z`` of shape ``(n, d_z)`` or ``(B, n, d_z)``.

    ``kv`` optionally supplies a precomputed per-head ``K~^T V~ / n`` (shape
    ``(B, H, d, d)``) so that a large query set can be processed in chunks
    while every query still attends to all of them.
    """
    squeeze = z.ndim == 2
    if squeeze:
        z = T.reshape(z, (1,) + z.shape)
    if z.ndim != 3 or z.shape[-1] != cfg.d_z:
        raise ShapeError(f"galerkin_attention: expected (.., n, {cfg.d_z}), got {z.shape}")
    b, n, _ = z.shape
    prefix = f"layers.{layer}.attn"
    q, k, v = _heads(z, weights, prefix, cfg)
    if capture is not None:
        capture[f"v{layer + 1}"] = v.data.transpose(0, 2, 1, 3).reshape(b, n, cfg.d_z).copy()
    if kv is None:
        kv = T.scale(_kv_product(k, v, cfg), 1.0 / n)
    out = T.matmul(q, kv)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, cfg.d_z))
    if cfg.out_proj:
        out = T.linear(out, weights[f"{prefix}.out.weight"], weights[f"{prefix}.out.bias"])
    if squeeze:
        out = T.reshape(out, (n, cfg.d_z))
    return out


def attention_kv_sum(z: T.Tensor, weights: dict, cfg: SrnoConfig, layer: int = 0) -> np.ndarray:
    """Un-normalized ``K~^T V~`` for one chunk of queries (no gradient)."""
    zb = z if z.ndim == 3 else T.reshape(z, (1,) + z.shape)
    _, k, v = _heads(zb, weights, f"layers.{layer}.attn", cfg)
    return _kv_product(k, v, cfg).data


def attention_block(state: LatentState, weights: dict, cfg: SrnoConfig, layer: int = 0,
                    kv=None, capture=None) -> LatentState:
    """``z + FFN(attn(z) + z)`` with a point-wise two-layer GELU FFN."""
    z = state.z
    u = T.add(galerkin_attention(z, weights, cfg, layer, kv=kv, capture=capture), z)
    p = f"layers.{layer}.ffn"
    hdn = T.gelu(T.linear(u, weights[f"{p}.fc1.weight"], weights[f"{p}.fc1.bias"]))
    out = T.add(z, T.linear(hdn, weights[f"{p}.fc2.weight"], weights[f"{p}.fc2.bias"]))
    return LatentState(out)


def project(state: LatentState, weights: dict) -> T.Tensor:
    hdn = T.gelu(T.linear(state.z, weights["proj.fc1.weight"], weights["proj.fc1.bias"]))
    return T.linear(hdn, weights["proj.fc2.weight"], weights["proj.fc2.bias"])


def forward(lr: T.Tensor, q: QuerySet, cfg: SrnoConfig, weights: dict,
            capture: dict | None = None) -> T.Tensor:
    """Mean-shifted LR ``(3,h,w)``/``(B,3,h,w)`` -> mean-shifted RGB ``(n,3)``/``(B,n,3)``."""
    feats = enc.encode(lr, cfg.encoder, weights)
    state = lift(feats, q, weights)
    if capture is not None:
        capture["z0"] = state.z.data.copy()
    for t in range(cfg.T):
        state = attention_block(state, weights, cfg, t, capture=capture)
        if capture is not None:
            capture[f"z{t + 1}"] = state.z.data.copy()
    return project(state, weights)


def forward_chunked(lr: T.Tensor, q: QuerySet, cfg: SrnoConfig, weights: dict,
                    chunk: int) -> np.ndarray:
    """Inference-only forward with bounded memory and exact global attention.

    Queries are processed ``chunk`` at a time; each layer first accumulates
    ``K~^T V~`` over all chunks, then updates every chunk with the shared
    product. Equivalent to :func:`forward` up to summation order.
    """
    if T.active_tape() is not None:
        raise RuntimeError("forward_chunked does not record gradients")
    feats = enc.encode(lr, cfg.encoder, weights)
    squeeze = feats.values.ndim == 3
    b = 1 if squeeze else feats.values.shape[0]
    coords, cell = _batched(q, b)
    n = coords.shape[1]
    spans = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    fm = feats if not squeeze else enc.FeatureMap(T.reshape(feats.values, (1,) + feats.values.shape))
    zs = [lift(fm, QuerySet(coords[:, a:e], cell[:, a:e]), weights).z for a, e in spans]
    for t in range(cfg.T):
        acc = None
        for z in zs:
            part = attention_kv_sum(z, weights, cfg, t)
            acc = part if acc is None else acc + part
        kv = T.Tensor(acc / n, dtype=zs[0].dtype)
        zs = [attention_block(LatentState(z), weights, cfg, t, kv=kv).z for z in zs]
    out = np.concatenate([project(LatentState(z), weights).data for z in zs], axis=1)
    return out[0] if squeeze else out
