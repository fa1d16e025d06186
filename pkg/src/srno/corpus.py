"""Desk-scale corpus built from the sample images bundled with scikit-image
and scikit-learn, so experiments run without any download.

Training tiles and held-out tiles come from disjoint source images.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import data

log = logging.getLogger(__name__)

TRAIN_TILE = 256
VAL_TILE = 240   # divisible by 2, 3, 4, 6 and 8

# (source, number of tiles)
TRAIN_SOURCES = [
    ("astronaut", 2), ("coffee", 2), ("rocket", 2), ("hubble_deep_field", 3),
    ("immunohistochemistry", 2), ("retina", 3), ("stereo_left", 2), ("china", 3),
    ("brick", 1), ("grass", 1), ("gravel", 1), ("moon", 1), ("clock", 1), ("cell", 2),
]
VAL_SOURCES = ["flower", "chelsea", "camera", "stereo_right", "coins"]


def _source(name: str) -> np.ndarray:
    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image

        img = load_sample_image(f"{name}.jpg")
    else:
        import skimage.data as skd

        if name.startswith("stereo_"):
            left, right, _ = skd.stereo_motorcycle()
            img = left if name.endswith("left") else right
        else:
            img = getattr(skd, name)()
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return np.ascontiguousarray(img[..., :3]).astype(np.uint8)


def _tiles(img: np.ndarray, size: int, count: int):
    """Up to ``count`` evenly spaced, non-overlapping tiles along the longer axis."""
    h, w = img.shape[:2]
    if min(h, w) < size:
        raise ValueError(f"source {h}x{w} smaller than tile {size}")
    along_w = w >= h
    extent, other = (w, h) if along_w else (h, w)
    count = min(count, extent // size)
    gap = (extent - count * size) // (count + 1)
    off = (other - size) // 2
    for i in range(count):
        s = gap + i * (size + gap)
        yield img[off:off + size, s:s + size] if along_w else img[s:s + size, off:off + size]


def _write(tile: np.ndarray, path: Path):
    data.save_image(data.ImageRGB(tile.transpose(2, 0, 1).astype(np.float32) / 255.0), path)


def build_corpus(root) -> tuple[Path, Path]:
    """Write ``root/train`` and ``root/val`` PNG tiles; returns both directories."""
    root = Path(root)
    train_dir, val_dir = root / "train", root / "val"
    train_dir.mkdir(parents=True, exist_ok=True)
    val_dir.mkdir(parents=True, exist_ok=True)
    for name, count in TRAIN_SOURCES:
        for i, tile in enumerate(_tiles(_source(name), TRAIN_TILE, count)):
            _write(tile, train_dir / f"{name}_{i}.png")
    for name in VAL_SOURCES:
        tile = next(_tiles(_source(name), VAL_TILE, 1))
        _write(tile, val_dir / f"{name}.png")
    log.info("corpus: %d train tiles, %d val tiles under %s",
             len(data.list_images(train_dir)), len(data.list_images(val_dir)), root)
    return train_dir, val_dir
