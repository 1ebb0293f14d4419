"""Grayscale image container, raster I/O, Sobel gradients and gradient energy."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import _kernels
from .errors import ImageReadError, ValidationError

RANGES = {
    "unit": (0.0, 1.0),
    "model": (-1.0, 1.0),
    "byte": (0.0, 255.0),
}

LUMA = (0.299, 0.587, 0.114)

IMAGE_SUFFIXES = {".png", ".pgm", ".bmp", ".ppm", ".tif", ".tiff", ".jpg", ".jpeg"}


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel intensity grid tagged with its value range.

    ``range_tag`` is one of ``unit`` ([0, 1]), ``model`` ([-1, 1]) or
    ``byte`` ([0, 255]). Data is stored as a read-only float64 array.
    """

    data: np.ndarray
    range_tag: str = "unit"

    def __post_init__(self):
        if self.range_tag not in RANGES:
            raise ValidationError(f"unknown range_tag {self.range_tag!r}")
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"GrayImage needs a 2-D array, got shape {arr.shape}")
        if arr.size == 0:
            raise ValidationError("GrayImage is empty")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("GrayImage contains non-finite values")
        lo, hi = RANGES[self.range_tag]
        if arr.min() < lo or arr.max() > hi:
            raise ValidationError(
                f"values [{arr.min():g}, {arr.max():g}] outside {self.range_tag} range [{lo:g}, {hi:g}]"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray

    @property
    def magnitude(self):
        return np.hypot(self.gx, self.gy)


@dataclass(frozen=True, eq=False)
class MultiModalTensor:
    """Two-channel sample in model range. Channel 0 is infrared, channel 1 visible."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValidationError(f"MultiModalTensor needs shape (2, H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("MultiModalTensor contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def split(self):
        return GrayImage(self.data[0], "model"), GrayImage(self.data[1], "model")


def load_gray(path):
    """Read a PNG/PGM/BMP raster as a unit-range GrayImage.

    Colour inputs are reduced with BT.601 luma weights; alpha is dropped.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0:
        raise ValidationError(f"image {path} has zero size")

    if mode in ("1",):
        arr = arr.astype(np.float64)
        scale = 1.0
    elif mode.startswith("I;16") or mode == "I":
        scale = 65535.0
    elif mode == "F":
        scale = 1.0
    else:
        scale = 255.0
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 2:  # LA
            arr = arr[..., 0]
        else:
            r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
            arr = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    arr = np.clip(arr / scale, 0.0, 1.0)
    return GrayImage(arr, "unit")


def list_images(directory):
    """Map filename -> path for the raster files directly inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def save_gray(img, path):
    """Write an 8-bit grayscale raster (format chosen by file suffix)."""
    byte = np.round(to_byte(img)).astype(np.uint8)
    Image.fromarray(byte, mode="L").save(Path(path))


def _require(img, tag):
    if img.range_tag != tag:
        raise ValidationError(f"expected range_tag {tag!r}, got {img.range_tag!r}")


def to_model_range(img):
    _require(img, "unit")
    return GrayImage(np.clip(2.0 * img.data - 1.0, -1.0, 1.0), "model")


def to_unit_range(img):
    if img.range_tag == "unit":
        return img
    if img.range_tag == "model":
        return GrayImage(np.clip((img.data + 1.0) / 2.0, 0.0, 1.0), "unit")
    return GrayImage(img.data / 255.0, "unit")


def to_byte(img):
    """Return the intensities as a float64 array on the [0, 255] scale."""
    if img.range_tag == "byte":
        return np.array(img.data)
    return to_unit_range(img).data * 255.0


def _check_gradient_size(arr):
    if arr.ndim != 2 or arr.shape[0] < 3 or arr.shape[1] < 3:
        raise ValidationError(f"gradient operations need at least 3x3 pixels, got {arr.shape}")


def _data(img):
    return img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def sobel(img):
    """3x3 Sobel responses with replicate padding.

    ``gx`` responds to change along columns (left to right), ``gy`` to change
    along rows (top to bottom). Accepts a GrayImage or a bare 2-D array.
    """
    arr = _data(img)
    _check_gradient_size(arr)
    gx, gy = _kernels.sobel(np.ascontiguousarray(arr, dtype=np.float64))
    return GradientField(gx, gy)


def gradient_energy(img):
    """Mean over pixels of gx**2 + gy**2."""
    g = sobel(img)
    return float(np.mean(g.gx * g.gx + g.gy * g.gy))


def concat_pair(ir, vis):
    if ir.shape != vis.shape:
        raise ValidationError(f"shape mismatch: ir {ir.shape} vs vis {vis.shape}")
    _require(ir, "model")
    _require(vis, "model")
    return MultiModalTensor(np.stack([ir.data, vis.data]))


def crop_window(height, width, size, seed):
    """Top-left corner of a size x size window drawn uniformly from a seeded RNG."""
    if size < 1 or size > height or size > width:
        raise ValidationError(f"crop {size} does not fit image {height}x{width}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_crop_pair(ir, vis, size, seed):
    if ir.shape != vis.shape:
        raise ValidationError(f"shape mismatch: ir {ir.shape} vs vis {vis.shape}")
    top, left = crop_window(ir.height, ir.width, size, seed)
    win = (slice(top, top + size), slice(left, left + size))
    return GrayImage(ir.data[win], ir.range_tag), GrayImage(vis.data[win], vis.range_tag)
