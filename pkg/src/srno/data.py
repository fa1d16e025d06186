"""Image I/O, bicubic resampling and training-batch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .operator import grid_coords

RGB_MEAN = (0.5, 0.5, 0.5)
IMAGE_SUFFIXES = (".png", ".ppm")


class ImageIOError(IOError):
    pass


@dataclass
class ImageRGB:
    """``pixels`` is a float32 ``(3, H, W)`` array with values in ``[0, 1]``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[0] != 3:
            raise ValueError(f"ImageRGB: expected (3, H, W) pixels, got {px.shape}")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


def make_rng(seed: int, worker: int = 0) -> np.random.Generator:
    """PCG64 stream for ``worker``; streams of one seed never overlap.

    Worker ``i`` uses the ``i``-th child of ``SeedSequence(seed)``, i.e.
    ``SeedSequence(seed).spawn(i + 1)[i]``.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(worker,))))


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:2] != b"P6":
        raise ImageIOError(f"{path}: not a binary PPM (P6) file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: malformed PPM header")
        fields.append(int(raw[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageIOError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = raw[pos:pos + width * height * 3]
    if len(payload) != width * height * 3:
        raise ImageIOError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(f"{path}: unsupported format {im.format}")
            if im.mode in ("L", "P"):
                im = im.convert("RGB")
            if im.mode != "RGB":
                raise ImageIOError(f"{path}: unsupported PNG mode {im.mode} (need 8-bit RGB)")
            return np.asarray(im, dtype=np.uint8)
    except ImageIOError:
        raise
    except (OSError, SyntaxError) as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def load_image(path) -> ImageRGB:
    path = Path(path)
    try:
        head = path.open("rb").read(8)
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror}") from exc
    if head.startswith(b"P6"):
        arr = _read_ppm(path)
    elif head.startswith(b"\x89PNG"):
        arr = _read_png(path)
    else:
        raise ImageIOError(f"{path}: unsupported image format (need PNG or PPM P6)")
    return ImageRGB(arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    """``[0,1]`` floats -> uint8 with round-half-away-from-zero, ``(H, W, C)``."""
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    q = np.floor(px * 255.0 + 0.5).astype(np.uint8)
    return q.transpose(1, 2, 0) if q.ndim == 3 else q


def save_image(img, path):
    """Write an :class:`ImageRGB` (or a ``(H, W)`` grayscale array) as PNG or PPM."""
    path = Path(path)
    pixels = img.pixels if isinstance(img, ImageRGB) else np.asarray(img)
    arr = to_bytes(pixels)
    suffix = path.suffix.lower()
    try:
        if suffix == ".ppm":
            if arr.ndim != 3:
                arr = np.repeat(arr[..., None], 3, axis=-1)
            h, w, _ = arr.shape
            path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())
        elif suffix == ".png":
            from PIL import Image

            Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path)
        else:
            raise ImageIOError(f"{path}: unsupported output format {suffix!r}")
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(directory) -> list[ImageRGB]:
    paths = list_images(directory)
    if not paths:
        raise ImageIOError(f"{directory}: no PNG/PPM images found")
    return [load_image(p) for p in paths]


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def cubic_kernel(x, a: float = -0.5):
    """Keys cubic-convolution kernel (Catmull-Rom for ``a = -0.5``)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Dense ``(n_out, n_in)`` 1-D bicubic resampling operator.

    Output pixel ``i`` samples source position ``(i + 0.5) * n_in / n_out - 0.5``,
    so pixel centers line up with :func:`make_coord`. Out-of-range taps are
    clamped to the edge. When shrinking and ``antialias`` is set, the kernel
    is stretched by the reduction factor.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize_matrix: sizes must be >= 1, got {n_in} -> {n_out}")
    ratio = n_in / n_out
    support = 2.0 * max(ratio, 1.0) if antialias else 2.0
    stretch = max(ratio, 1.0) if antialias else 1.0
    centers = (np.arange(n_out) + 0.5) * ratio - 0.5
    taps = np.arange(-int(np.ceil(support)), int(np.ceil(support)) + 2)
    first = np.floor(centers).astype(np.int64)
    src = first[:, None] + taps[None, :]
    wts = cubic_kernel((centers[:, None] - src) / stretch)
    wts /= wts.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    rows = np.broadcast_to(np.arange(n_out)[:, None], src.shape)
    np.add.at(m, (rows, np.clip(src, 0, n_in - 1)), wts)
    return m


def bicubic_resize(img, out_h: int, out_w: int, antialias: bool = True, clamp: bool = True):
    """Separable bicubic resize of an :class:`ImageRGB` or ``(C, H, W)`` array."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bicubic_resize: output size must be >= 1, got {out_h}x{out_w}")
    pixels = img.pixels if isinstance(img, ImageRGB) else np.asarray(img)
    _, h, w = pixels.shape
    if (h, w) == (out_h, out_w):
        out = pixels.astype(np.float32, copy=True)
    else:
        my = resize_matrix(h, out_h, antialias)
        mx = resize_matrix(w, out_w, antialias)
        out = np.einsum("ij,cjk,lk->cil", my, pixels.astype(np.float64), mx, optimize=True)
        out = out.astype(np.float32)
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return ImageRGB(out) if isinstance(img, ImageRGB) else out


# ---------------------------------------------------------------------------
# training batches
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    lr_patch: np.ndarray    # (3, p, p)
    coords: np.ndarray      # (q, 2)
    cell: np.ndarray        # (2,)
    target_rgb: np.ndarray  # (q, 3)
    scale: float


def draw_scale(rng: np.random.Generator, lo: float = 1.0, hi: float = 4.0) -> float:
    return float(rng.uniform(lo, hi))


def sample_one(img: ImageRGB, p: int, q: int, mode: str, rng: np.random.Generator,
               scale_range=(1.0, 4.0), max_tries: int = 100) -> TrainSample:
    h, w = img.height, img.width
    lo, hi = scale_range
    for _ in range(max_tries):
        r = draw_scale(rng, lo, hi)
        side = int(round(p * r))
        if side <= min(h, w):
            break
    else:
        side = min(h, w)
        r = side / p
    if q > side * side:
        raise ValueError(f"sample_batch: q={q} exceeds the {side}x{side} HR crop")
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    hr = img.pixels[:, y0:y0 + side, x0:x0 + side]
    lr = bicubic_resize(hr, p, p)
    if mode == "random":
        idx = rng.choice(side * side, size=q, replace=False)
    elif mode == "sequential":
        start = int(rng.integers(0, side * side - q + 1))
        idx = np.arange(start, start + q)
    else:
        raise ValueError(f"sample_batch: unknown mode {mode!r}")
    coords = grid_coords(side, side)[idx]
    target = hr.reshape(3, -1)[:, idx].T
    return TrainSample(lr, coords, np.array([2.0 / side, 2.0 / side]),
                       np.ascontiguousarray(target, dtype=np.float32), r)


def sample_batch(dataset, batch: int, p: int, q: int, mode: str, rng: np.random.Generator):
    """``batch`` random-scale patches, one drawn from a uniformly chosen image each."""
    if not dataset:
        raise ValueError("sample_batch: empty dataset")
    if mode not in ("random", "sequential"):
        raise ValueError(f"sample_batch: unknown mode {mode!r}")
    out = []
    for _ in range(batch):
        img = dataset[int(rng.integers(0, len(dataset)))]
        out.append(sample_one(img, p, q, mode, rng))
    return out


def collate(samples, mean=RGB_MEAN):
    """Stack samples into mean-shifted arrays ready for a batched forward."""
    m = np.asarray(mean, dtype=np.float32)
    lr = np.stack([s.lr_patch for s in samples]) - m[None, :, None, None]
    coords = np.stack([s.coords for s in samples])
    cell = np.stack([s.cell for s in samples])
    target = np.stack([s.target_rgb for s in samples]) - m
    return lr, coords, cell, target
