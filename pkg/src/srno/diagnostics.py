"""Latent-rank tracking and basis-function image dumps."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import data
from . import operator as op
from .errors import NumericError


def _round_robin(n: int):
    """Disjoint column pairings covering every pair once (circle method)."""
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(p, q) for p, q in pairs if p < n and q < n]
        rounds.append((np.array([p for p, _ in pairs], dtype=np.int64),
                       np.array([q for _, q in pairs], dtype=np.int64)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def jacobi_singular_values(a, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Singular values of ``a`` in descending order by one-sided Jacobi rotations.

    Column pairs are orthogonalized in parallel rounds (each round rotates a
    set of disjoint pairs at once). Tall inputs are first reduced to their
    ``R`` factor, which has the same singular values.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    if a.shape[0] > a.shape[1]:
        a = np.linalg.qr(a, mode="r")
    n = a.shape[1]
    if n == 1:
        return np.abs(a).sum(axis=0) if a.shape[0] == 1 else np.linalg.norm(a, axis=0)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = 0.0
        for P, Q in rounds:
            ap, aq = a[:, P], a[:, Q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha) * np.sqrt(beta)   # product of norms; alpha*beta can underflow
            active = np.abs(gamma) > tol * denom
            if not active.any():
                continue
            off = max(off, float(np.max(np.abs(gamma[active]) / denom[active])))
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            a[:, P] = c * ap - s * aq
            a[:, Q] = s * ap + c * aq
        if off <= tol:
            break
    return np.sort(np.linalg.norm(a, axis=0))[::-1]


def latent_rank(z, tol: float = 1e-4) -> int:
    """Number of singular values above ``tol * sigma_max``."""
    z = np.asarray(getattr(z, "data", z), dtype=np.float64)
    if z.ndim != 2 or min(z.shape) < 1:
        raise ValueError(f"latent_rank: expected a non-empty matrix, got {z.shape}")
    if tol <= 0:
        raise ValueError("latent_rank: tol must be positive")
    if not np.all(np.isfinite(z)):
        raise NumericError("latent_rank: non-finite entries")
    sv = jacobi_singular_values(z)
    if sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > tol * sv[0]))


def capture_latents(model, image: data.ImageRGB, scale: float = 2.0):
    """Forward over the full HR grid for ``image`` as LR input, keeping ``z_t`` and ``V``."""
    from .model import upscale_size

    H, W = upscale_size(image.height, image.width, scale)
    cap = {}
    model.query(image, op.grid_queries(H, W), capture=cap)
    return cap, (H, W)


def rank_trace(model, images, names=None, scale: float = 2.0, tol: float = 1e-4):
    """Rows ``(image, layer, rank)`` for ``z_1 .. z_T`` measured after each block."""
    names = names or [f"img{i:03d}" for i in range(len(images))]
    rows = []
    for name, img in zip(names, images):
        cap, _ = capture_latents(model, img, scale)
        for t in range(1, model.cfg.T + 1):
            z = cap[f"z{t}"][0] if cap[f"z{t}"].ndim == 3 else cap[f"z{t}"]
            rows.append((name, t, latent_rank(z, tol)))
    return rows


def write_rank_csv(rows, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "layer", "rank"])
        w.writerows(rows)


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.full(m.shape, 0.5)
    return (m - lo) / (hi - lo)


def dump_basis(model, image: data.ImageRGB, layer: int, columns, out_dir, scale: float = 2.0,
               prefix: str = "") -> list[Path]:
    """Write selected columns of ``V`` and ``z`` at ``layer`` as grayscale PNGs on the query grid."""
    if not 1 <= layer <= model.cfg.T:
        raise ValueError(f"dump_basis: layer must be in 1..{model.cfg.T}, got {layer}")
    columns = list(columns)
    for c in columns:
        if not 0 <= c < model.cfg.d_z:
            raise ValueError(f"dump_basis: column {c} out of range for d_z={model.cfg.d_z}")
    cap, (H, W) = capture_latents(model, image, scale)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, key in (("v", f"v{layer}"), ("z", f"z{layer}")):
        arr = cap[key]
        arr = arr[0] if arr.ndim == 3 else arr
        for c in columns:
            path = out_dir / f"{prefix}{kind}{layer}_c{c:03d}.png"
            data.save_image(normalize_map(arr[:, c].reshape(H, W)), path)
            written.append(path)
    return written
