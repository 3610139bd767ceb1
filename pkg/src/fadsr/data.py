"""Image I/O, MATLAB-style bicubic resizing, Y-channel metrics and patch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageDecodeError(IOError):
    pass


@dataclass
class ImageBuffer:
    """8-bit RGB image stored as (H, W, 3) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"ImageBuffer needs (H, W, 3) pixels, got {px.shape}")
        self.pixels = px.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    def to_chw(self, dtype=np.float32) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1)).astype(dtype) / dtype(255.0)

    @classmethod
    def from_float(cls, arr: np.ndarray, channel_axis: int = -1) -> "ImageBuffer":
        """Quantize a [0, 1] float image (clamped, rounded half up) to 8 bits."""
        arr = np.moveaxis(np.asarray(arr, dtype=np.float64), channel_axis, -1)
        return cls(np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))


def load_png(path) -> ImageBuffer:
    """Read a PNG as 8-bit RGB.

    16-bit inputs keep the high byte (low byte truncated); grayscale is
    replicated to three channels and alpha is dropped.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im).astype(np.uint32) >> 8
                rgb = np.repeat(arr.astype(np.uint8)[..., None], 3, axis=2)
            else:
                rgb = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return ImageBuffer(rgb.copy())


def save_png(img: ImageBuffer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IOError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Bicubic resize (MATLAB imresize convention)


def cubic(x: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1)
    far = (-0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0) * ((ax > 1) & (ax <= 2))
    return near + far


def resize_weights(in_len: int, out_len: int, scale: float, antialias: bool = True):
    """Per-output-sample source indices and weights along one axis."""
    width = 4.0
    if scale < 1 and antialias:
        kernel = lambda t: scale * cubic(scale * t)
        width = width / scale
    else:
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - width / 2.0)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]  # 1-based source positions
    w = kernel(u[:, None] - idx)
    w = w / w.sum(axis=1, keepdims=True)
    keep = np.any(w != 0, axis=0)
    w, idx = w[:, keep], idx[:, keep]
    # symmetric boundary: mirror including the edge sample
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    return src, w


def _resize_axis(arr: np.ndarray, axis: int, out_len: int, scale: float, antialias: bool) -> np.ndarray:
    src, w = resize_weights(arr.shape[axis], out_len, scale, antialias)
    moved = np.moveaxis(arr, axis, 0)
    gathered = moved[src]  # (out, taps, ...)
    shape = w.shape + (1,) * (moved.ndim - 1)
    out = (gathered * w.reshape(shape)).sum(axis=1)
    return np.moveaxis(out, 0, axis)


def bicubic_resize_array(arr: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Resize an (H, W[, C]) float array; height is processed before width on ties."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target dimensions must be positive")
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    sh, sw = out_h / h, out_w / w
    order = [(0, out_h, sh), (1, out_w, sw)]
    if sw < sh:
        order.reverse()
    for axis, n, s in order:
        if arr.shape[axis] != n or s != 1.0:
            arr = _resize_axis(arr, axis, n, s, antialias)
    return arr


def bicubic_resize(img, out_w: int, out_h: int):
    """MATLAB-compatible bicubic resize.

    An :class:`ImageBuffer` input yields an :class:`ImageBuffer` (rounded to 8
    bits as MATLAB does for uint8); a float array yields an unclamped float array.
    """
    if isinstance(img, ImageBuffer):
        out = bicubic_resize_array(img.pixels.astype(np.float64), out_h, out_w)
        return ImageBuffer(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))
    return bicubic_resize_array(img, out_h, out_w)


def modcrop(img: ImageBuffer, scale: int) -> ImageBuffer:
    h, w = img.height - img.height % scale, img.width - img.width % scale
    return ImageBuffer(img.pixels[:h, :w])


def degrade(hr: ImageBuffer, scale: int) -> ImageBuffer:
    """Bicubic LR counterpart of a modcropped HR image."""
    hr = modcrop(hr, scale)
    return bicubic_resize(hr, hr.width // scale, hr.height // scale)


# ---------------------------------------------------------------------------
# Color and metrics


def rgb_to_y(img, channel_axis: int = -1) -> np.ndarray:
    """BT.601 studio-swing luma on the [0, 1] scale (black 16/255, white 235/255)."""
    if isinstance(img, ImageBuffer):
        rgb = img.to_float()
    else:
        rgb = np.moveaxis(np.asarray(img, dtype=np.float64), channel_axis, -1)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected 3 color channels, got shape {rgb.shape}")
    return (16.0 + 65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255.0


def _luma_pair(a, b, shave: int) -> tuple:
    ya, yb = _as_luma(a), _as_luma(b)
    if ya.shape != yb.shape:
        raise ValueError(f"image sizes differ: {ya.shape} vs {yb.shape}")
    if shave < 0:
        raise ValueError("shave must be nonnegative")
    h, w = ya.shape
    if h - 2 * shave < 1 or w - 2 * shave < 1:
        raise ValueError(f"image {h}x{w} too small for shave={shave}")
    if shave:
        ya, yb = ya[shave:-shave, shave:-shave], yb[shave:-shave, shave:-shave]
    return ya, yb


def _as_luma(img) -> np.ndarray:
    if isinstance(img, ImageBuffer):
        return rgb_to_y(img)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return rgb_to_y(arr)


def psnr(a, b, shave: int = 0) -> float:
    """Y-channel PSNR in dB on the [0, 1] scale; ``inf`` for identical images."""
    ya, yb = _luma_pair(a, b, shave)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    h, w = x.shape
    rows = sum(g[i] * x[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, shave: int = 0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM on Y with an 11x11 Gaussian window (sigma 1.5), valid positions only."""
    ya, yb = _luma_pair(a, b, shave)
    if min(ya.shape) < 11:
        raise ValueError("image too small for an 11x11 SSIM window")
    g = gaussian_window()
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    saa = _filter_valid(ya * ya, g) - mu_a ** 2
    sbb = _filter_valid(yb * yb, g) - mu_b ** 2
    sab = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Datasets and patches


@dataclass
class Dataset:
    hr_paths: list
    lr_paths: Optional[list] = None
    split: str = "train"
    scale: int = 2
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.hr_paths)

    def pair(self, i: int) -> tuple:
        """(HR modcropped, LR) for image ``i``; LR is bicubic-degraded if not supplied."""
        if i in self._cache:
            return self._cache[i]
        hr = modcrop(load_png(self.hr_paths[i]), self.scale)
        if self.lr_paths and self.lr_paths[i]:
            lr = load_png(self.lr_paths[i])
            if (lr.height, lr.width) != (hr.height // self.scale, hr.width // self.scale):
                raise ValueError(f"{self.lr_paths[i]}: LR size {lr.width}x{lr.height} does not match "
                                 f"HR {hr.width}x{hr.height} / {self.scale}")
        else:
            lr = bicubic_resize(hr, hr.width // self.scale, hr.height // self.scale)
        self._cache[i] = (hr, lr)
        return hr, lr

    def name(self, i: int) -> str:
        return Path(self.hr_paths[i]).stem


def read_manifest(path, scale: int = 2, split: str = "train") -> Dataset:
    """One HR path per line, optionally ``hr<TAB>lr``; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    hr, lr = [], []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        hr.append(str((path.parent / parts[0]).resolve()))
        lr.append(str((path.parent / parts[1]).resolve()) if len(parts) > 1 else None)
    if not hr:
        raise ValueError(f"dataset manifest {path} lists no images")
    for p in hr + [q for q in lr if q]:
        if not Path(p).is_file():
            raise FileNotFoundError(f"image listed in {path} not found: {p}")
    return Dataset(hr, lr if any(lr) else None, split, scale)


def _augment(arr: np.ndarray, hflip: bool, vflip: bool, rot: bool) -> np.ndarray:
    if hflip:
        arr = arr[:, :, ::-1]
    if vflip:
        arr = arr[:, ::-1, :]
    if rot:
        arr = arr.transpose(0, 2, 1)
    return np.ascontiguousarray(arr)


def sample_patches(hr: ImageBuffer, scale: int, lr_patch: int, rng: np.random.Generator,
                   augment: bool = True, lr: Optional[ImageBuffer] = None,
                   flips: Optional[Sequence[bool]] = None) -> tuple:
    """Aligned random crop; returns CHW float32 arrays (3, p, p) and (3, sp, sp).

    ``flips`` overrides the random (hflip, vflip, transpose) draw.
    """
    hp = lr_patch * scale
    lh, lw = hr.height // scale, hr.width // scale
    if lh < lr_patch or lw < lr_patch:
        raise ValueError(f"image {hr.width}x{hr.height} too small for a {hp}x{hp} HR crop")
    y = int(rng.integers(0, lh - lr_patch + 1))
    x = int(rng.integers(0, lw - lr_patch + 1))
    draw = rng.random(3) < 0.5
    if flips is None:
        flips = draw if augment else (False, False, False)
    hr_crop = ImageBuffer(hr.pixels[y * scale:y * scale + hp, x * scale:x * scale + hp])
    if lr is not None:
        lr_crop = ImageBuffer(lr.pixels[y:y + lr_patch, x:x + lr_patch])
    else:
        lr_crop = bicubic_resize(hr_crop, lr_patch, lr_patch)
    lr_arr = _augment(lr_crop.to_chw(), *flips)
    hr_arr = _augment(hr_crop.to_chw(), *flips)
    return lr_arr, hr_arr
