"""Pixel containers and lossless PNG I/O.

All pixel data lives in float64 arrays scaled to [0, 1]; 8-bit values
exist only at file boundaries. Quantization rounds half up so written
files are bit-reproducible across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage
from PIL import UnidentifiedImageError

__all__ = [
    "Image",
    "ImagePair",
    "BackgroundPair",
    "ChangeMask",
    "ImageIOError",
    "load_image",
    "save_image",
    "load_pair",
    "save_pair",
    "blend",
    "hadamard",
    "quantize_u8",
    "fit_to_shape",
]


class ImageIOError(RuntimeError):
    """Raised when an image file cannot be decoded as 8-bit PNG."""


def quantize_u8(arr: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-up semantics."""
    return np.floor(np.asarray(arr) * 255.0 + 0.5).astype(np.uint8)


def _validated_pixels(data: np.ndarray) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(
            f"pixel data must have shape (H, W, C) with C in {{1, 3}}, got {arr.shape}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"empty raster {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("pixel data contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel data outside [0, 1]: range [{lo}, {hi}]")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """Raster of shape (height, width, channels), values in [0, 1].

    The backing array is copied on construction and marked read-only,
    so instances can be shared freely.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validated_pixels(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 1) -> "Image":
        return cls(np.zeros((height, width, channels)))

    @classmethod
    def full(cls, height: int, width: int, value: float, channels: int = 1) -> "Image":
        return cls(np.full((height, width, channels), float(value)))


@dataclass(frozen=True)
class ImagePair:
    """Co-registered before/after images of identical shape."""

    first: Image
    second: Image

    def __post_init__(self) -> None:
        if self.first.shape != self.second.shape:
            raise ValueError(
                f"pair images disagree in shape: {self.first.shape} vs {self.second.shape}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.first.shape


class BackgroundPair(ImagePair):
    """Image pair vouched to contain no object changes.

    Structurally identical to ImagePair; the distinct type records the
    curation promise and keeps call sites honest about which role a
    pair is playing.
    """


@dataclass(frozen=True)
class ChangeMask:
    """Soft change map in [0, 1], shape (height, width)."""

    data: np.ndarray
    binarize_threshold: float = 0.5

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask must be a nonempty (H, W) array, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("mask values outside [0, 1]")
        if not 0.0 <= self.binarize_threshold <= 1.0:
            raise ValueError(f"binarize threshold outside [0, 1]: {self.binarize_threshold}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def binarize(self) -> np.ndarray:
        """Boolean support at the mask's own threshold (>= comparison)."""
        return self.data >= self.binarize_threshold

    @classmethod
    def zeros(cls, height: int, width: int) -> "ChangeMask":
        return cls(np.zeros((height, width)))

    @classmethod
    def ones(cls, height: int, width: int) -> "ChangeMask":
        return cls(np.ones((height, width)))


def load_image(path: str | Path) -> Image:
    """Read an 8-bit grayscale or RGB PNG as floats in [0, 1].

    Values map as v / 255. Palette PNGs are expanded to RGB; alpha or
    16-bit files are rejected rather than silently flattened.
    """
    path = Path(path)
    try:
        with _PILImage.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(f"{path}: unsupported format {im.format!r}, expected PNG")
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB"):
                raise ImageIOError(f"{path}: unsupported PNG mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise ImageIOError(f"{path}: cannot decode as an image") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Image(arr)


def save_image(image: Image, path: str | Path) -> None:
    """Write an Image as 8-bit PNG, quantizing with round-half-up."""
    path = Path(path)
    q = quantize_u8(image.data)
    if image.channels == 1:
        pil = _PILImage.fromarray(q[:, :, 0], mode="L")
    else:
        pil = _PILImage.fromarray(q, mode="RGB")
    pil.save(path, format="PNG")


def load_pair(first_path: str | Path, second_path: str | Path) -> ImagePair:
    return ImagePair(load_image(first_path), load_image(second_path))


def save_pair(pair: ImagePair, first_path: str | Path, second_path: str | Path) -> None:
    save_image(pair.first, first_path)
    save_image(pair.second, second_path)


def blend(a: Image, b: Image, weight: float) -> Image:
    """Convex combination weight * a + (1 - weight) * b, clamped."""
    if a.shape != b.shape:
        raise ValueError(f"blend inputs disagree in shape: {a.shape} vs {b.shape}")
    w = float(weight)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"blend weight outside [0, 1]: {w}")
    return Image(np.clip(w * a.data + (1.0 - w) * b.data, 0.0, 1.0))


def hadamard(image: Image, mask: ChangeMask) -> Image:
    """Pixelwise product of an image with a single-channel mask.

    The mask broadcasts across channels; spatial shapes must match.
    """
    if image.data.shape[:2] != mask.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match image plane {image.data.shape[:2]}"
        )
    return Image(np.clip(image.data * mask.data[:, :, None], 0.0, 1.0))


def _resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers."""
    src_h, src_w = arr.shape[:2]

    def _axis_coords(dst: int, src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        scale = src / dst
        pos = (np.arange(dst) + 0.5) * scale - 0.5
        pos = np.clip(pos, 0.0, src - 1.0)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, src - 1)
        frac = pos - lo
        return lo, hi, frac

    y0, y1, fy = _axis_coords(height, src_h)
    x0, x1, fx = _axis_coords(width, src_w)
    top = arr[y0][:, x0] * (1 - fx)[None, :, None] + arr[y0][:, x1] * fx[None, :, None]
    bot = arr[y1][:, x0] * (1 - fx)[None, :, None] + arr[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def _center_crop(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    src_h, src_w = arr.shape[:2]
    y0 = (src_h - height) // 2
    x0 = (src_w - width) // 2
    return arr[y0 : y0 + height, x0 : x0 + width]


def fit_to_shape(image: Image, height: int, width: int) -> Image:
    """Conform an image to (height, width): center-crop when larger,
    bilinear-resize when smaller. Channel count is preserved."""
    arr = image.data
    crop_h = min(arr.shape[0], height)
    crop_w = min(arr.shape[1], width)
    arr = _center_crop(arr, crop_h, crop_w)
    if arr.shape[0] != height or arr.shape[1] != width:
        arr = _resize_bilinear(arr, height, width)
    return Image(np.clip(arr, 0.0, 1.0))
