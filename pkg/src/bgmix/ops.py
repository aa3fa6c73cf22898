"""The eight-operation augmentation catalog and chain application.

Operations fall into three groups:

* photometric (auto_contrast, equalize, posterize, solarize): applied
  to each image of the pair independently, mask untouched;
* geometric (rotate, shear, translate): one shared affine transform,
  bilinear for images, nearest for the mask, zero fill outside;
* bg_aware: composites the current pair over the provided background
  pair through the current working mask.

Array helpers accept arbitrary leading batch dimensions: images are
``(..., H, W, C)`` and masks ``(..., H, W)``. The public functions wrap
them for single Image/ImagePair/ChangeMask values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .compositing import _rep_arrays
from .imaging import BackgroundPair, ChangeMask, Image, ImagePair

__all__ = [
    "AugOp",
    "OpChain",
    "OP_KINDS",
    "PHOTOMETRIC_KINDS",
    "GEOMETRIC_KINDS",
    "apply_photometric",
    "apply_geometric",
    "apply_bg_aware",
    "apply_chain",
]

PHOTOMETRIC_KINDS = ("auto_contrast", "equalize", "posterize", "solarize")
GEOMETRIC_KINDS = ("rotate", "shear", "translate")
OP_KINDS = ("bg_aware",) + PHOTOMETRIC_KINDS + GEOMETRIC_KINDS

# required parameter names per kind; kinds absent from the map take none
_PARAM_KEYS: dict[str, tuple[str, ...]] = {
    "posterize": ("bits",),
    "solarize": ("threshold",),
    "rotate": ("degrees",),
    "shear": ("factor",),
    "translate": ("dx", "dy"),
}


@dataclass(frozen=True)
class AugOp:
    """One sampled operation: a kind plus its scalar parameters."""

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}, expected one of {OP_KINDS}")
        expected = _PARAM_KEYS.get(self.kind, ())
        got = tuple(sorted(self.params))
        if got != tuple(sorted(expected)):
            raise ValueError(
                f"{self.kind} takes params {sorted(expected)}, got {sorted(got)}"
            )
        params = {k: float(v) for k, v in self.params.items()}
        for name, value in params.items():
            if not np.isfinite(value):
                raise ValueError(f"{self.kind} param {name} is non-finite")
        if self.kind == "posterize":
            bits = params["bits"]
            if bits != int(bits) or not 1 <= bits <= 8:
                raise ValueError(f"posterize bits must be an integer in [1, 8], got {bits}")
        if self.kind == "solarize" and not 0.0 <= params["threshold"] <= 1.0:
            raise ValueError(f"solarize threshold outside [0, 1]: {params['threshold']}")
        object.__setattr__(self, "params", params)

    @property
    def is_geometric(self) -> bool:
        return self.kind in GEOMETRIC_KINDS

    @property
    def is_photometric(self) -> bool:
        return self.kind in PHOTOMETRIC_KINDS

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "AugOp":
        return cls(kind=obj["kind"], params=dict(obj.get("params", {})))


@dataclass(frozen=True)
class OpChain:
    """Ordered ops applied left to right, depth 1 to 3."""

    ops: tuple[AugOp, ...]

    def __post_init__(self) -> None:
        ops = tuple(self.ops)
        if not 1 <= len(ops) <= 3:
            raise ValueError(f"chain depth must be 1..3, got {len(ops)}")
        object.__setattr__(self, "ops", ops)

    def __len__(self) -> int:
        return len(self.ops)

    def to_dict(self) -> dict:
        return {"ops": [op.to_dict() for op in self.ops]}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "OpChain":
        return cls(ops=tuple(AugOp.from_dict(o) for o in obj["ops"]))


# ---------------------------------------------------------------------------
# photometric array cores


def _quantize255(arr: np.ndarray) -> np.ndarray:
    """Round-half-up 8-bit quantization used by the histogram ops."""
    return np.floor(arr * 255.0 + 0.5).astype(np.int64)


def _auto_contrast_arrays(arr: np.ndarray) -> np.ndarray:
    """Per-channel linear rescale of min..max to 0..1.

    Constant channels pass through unchanged.
    """
    lo = arr.min(axis=(-3, -2), keepdims=True)
    hi = arr.max(axis=(-3, -2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0.0, span, 1.0)
    return np.where(span > 0.0, (arr - lo) / safe, arr)


def _equalize_arrays(arr: np.ndarray) -> np.ndarray:
    """256-bin histogram equalization, independently per channel.

    Classic cdf remap: level v goes to round((cdf(v) - cdf_min) /
    (npix - cdf_min) * 255) where cdf_min is the cdf at the lowest
    occupied level. Constant channels pass through unchanged.
    """
    h, w = arr.shape[-3], arr.shape[-2]
    npix = h * w
    q = _quantize255(arr)
    # (..., H, W, C) -> (M, npix) with one row per leading-slice channel
    flat = np.moveaxis(q, -1, -3).reshape(-1, npix)
    rows = flat.shape[0]
    offsets = np.arange(rows, dtype=np.int64)[:, None] * 256
    counts = np.bincount((flat + offsets).ravel(), minlength=rows * 256).reshape(rows, 256)
    cdf = np.cumsum(counts, axis=1)
    occupied = counts > 0
    cdf_min = np.where(occupied, cdf, npix + 1).min(axis=1)
    denom = npix - cdf_min
    safe = np.where(denom > 0, denom, 1)
    lut = np.floor((cdf - cdf_min[:, None]) * 255.0 / safe[:, None] + 0.5)
    lut = np.clip(lut, 0.0, 255.0)
    identity = np.broadcast_to(np.arange(256, dtype=np.float64), lut.shape)
    lut = np.where((denom > 0)[:, None], lut, identity)
    out = lut[np.arange(rows)[:, None], flat] / 255.0
    out = np.moveaxis(out.reshape(q.shape[:-3] + (q.shape[-1], h, w)), -3, -1)
    # moveaxis above restores (..., H, W, C) from (..., C, H, W)
    return np.ascontiguousarray(out)


def _posterize_arrays(arr: np.ndarray, bits: int) -> np.ndarray:
    """Keep the top `bits` bits of the 8-bit quantization."""
    keep = (0xFF << (8 - int(bits))) & 0xFF
    return (_quantize255(arr) & keep) / 255.0


def _solarize_arrays(arr: np.ndarray, threshold: float) -> np.ndarray:
    """Invert values at or above the threshold."""
    return np.where(arr >= threshold, 1.0 - arr, arr)


def _photometric_arrays(op: AugOp, arr: np.ndarray) -> np.ndarray:
    if op.kind == "auto_contrast":
        return _auto_contrast_arrays(arr)
    if op.kind == "equalize":
        return _equalize_arrays(arr)
    if op.kind == "posterize":
        return _posterize_arrays(arr, int(op.params["bits"]))
    if op.kind == "solarize":
        return _solarize_arrays(arr, op.params["threshold"])
    raise ValueError(f"{op.kind} is not a photometric op")


# ---------------------------------------------------------------------------
# geometric array cores


def _inverse_matrix(op: AugOp, height: int, width: int) -> np.ndarray:
    """2x3 matrix mapping output pixel coords (x, y) to source coords.

    Rotation and shear act about the image center; positive degrees
    rotate content clockwise in pixel coordinates (y axis down).
    """
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    if op.kind == "rotate":
        t = np.deg2rad(op.params["degrees"])
        lin = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        shift = np.zeros(2)
    elif op.kind == "shear":
        lin = np.array([[1.0, op.params["factor"]], [0.0, 1.0]])
        shift = np.zeros(2)
    elif op.kind == "translate":
        lin = np.eye(2)
        shift = np.array([op.params["dx"], op.params["dy"]])
    else:
        raise ValueError(f"{op.kind} is not a geometric op")
    forward = np.eye(3)
    forward[:2, :2] = lin
    center = np.array([cx, cy])
    forward[:2, 2] = center - lin @ center + shift
    inv = np.linalg.inv(forward)
    return inv[:2, :]


def _source_grid(minv: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    sx = minv[0, 0] * gx + minv[0, 1] * gy + minv[0, 2]
    sy = minv[1, 0] * gx + minv[1, 1] * gy + minv[1, 2]
    return sx, sy


def _gather_image(arr: np.ndarray, iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
    h, w = arr.shape[-3], arr.shape[-2]
    flat = arr.reshape(arr.shape[:-3] + (h * w, arr.shape[-1]))
    idx = (iy * w + ix).ravel()
    out = flat[..., idx, :]
    return out.reshape(arr.shape[:-3] + iy.shape + (arr.shape[-1],))


def _warp_image_arrays(arr: np.ndarray, minv: np.ndarray) -> np.ndarray:
    """Bilinear inverse-mapped warp with zero fill outside the source."""
    h, w = arr.shape[-3], arr.shape[-2]
    sx, sy = _source_grid(minv, h, w)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros(arr.shape[:-3] + (h, w, arr.shape[-1]), dtype=np.float64)
    corners = (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    )
    for cy, cx, cw in corners:
        valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
        weight = np.where(valid, cw, 0.0)[..., None]
        gathered = _gather_image(arr, np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1))
        out = out + weight * gathered
    return out


def _warp_mask_arrays(mask: np.ndarray, minv: np.ndarray) -> np.ndarray:
    """Nearest-neighbor warp for masks, zero fill outside."""
    h, w = mask.shape[-2], mask.shape[-1]
    sx, sy = _source_grid(minv, h, w)
    ix = np.floor(sx + 0.5).astype(np.intp)
    iy = np.floor(sy + 0.5).astype(np.intp)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    flat = mask.reshape(mask.shape[:-2] + (h * w,))
    idx = (np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)).ravel()
    out = flat[..., idx].reshape(mask.shape[:-2] + iy.shape)
    return np.where(valid, out, 0.0)


# ---------------------------------------------------------------------------
# chain executor over raw arrays


def _chain_arrays(
    chain: OpChain,
    first: np.ndarray,
    second: np.ndarray,
    bg_first: np.ndarray,
    bg_second: np.ndarray,
    mask: np.ndarray,
    cotransform_mask: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Run a chain on pair arrays; returns the transformed pair arrays.

    Geometric steps co-transform a working copy of the mask (unless
    disabled) so a later bg_aware composites in aligned coordinates.
    The background arrays are never transformed.
    """
    h, w = first.shape[-3], first.shape[-2]
    work_mask = mask
    for op in chain.ops:
        if op.kind == "bg_aware":
            m = work_mask[..., None]
            first = _rep_arrays(first, bg_first, m)
            second = _rep_arrays(second, bg_second, m)
        elif op.is_photometric:
            first = _photometric_arrays(op, first)
            second = _photometric_arrays(op, second)
        else:
            minv = _inverse_matrix(op, h, w)
            first = _warp_image_arrays(first, minv)
            second = _warp_image_arrays(second, minv)
            if cotransform_mask:
                work_mask = _warp_mask_arrays(work_mask, minv)
    return first, second


# ---------------------------------------------------------------------------
# public single-pair API


def apply_photometric(op: AugOp, pair: ImagePair) -> ImagePair:
    """Apply a photometric op to both images; geometry untouched."""
    if not op.is_photometric:
        raise ValueError(f"apply_photometric got non-photometric op {op.kind!r}")
    a = _photometric_arrays(op, pair.first.data)
    b = _photometric_arrays(op, pair.second.data)
    return ImagePair(Image(np.clip(a, 0.0, 1.0)), Image(np.clip(b, 0.0, 1.0)))


def apply_geometric(op: AugOp, pair: ImagePair, mask: ChangeMask) -> tuple[ImagePair, ChangeMask]:
    """Apply one shared affine transform to both images and the mask.

    Images are resampled bilinearly, the mask nearest-neighbor; pixels
    mapping outside the source fill with zero. Shapes are preserved.
    """
    if not op.is_geometric:
        raise ValueError(f"apply_geometric got non-geometric op {op.kind!r}")
    if pair.first.data.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match pair {pair.shape}")
    h, w = mask.shape
    minv = _inverse_matrix(op, h, w)
    a = _warp_image_arrays(pair.first.data, minv)
    b = _warp_image_arrays(pair.second.data, minv)
    m = _warp_mask_arrays(mask.data, minv)
    out_pair = ImagePair(Image(np.clip(a, 0.0, 1.0)), Image(np.clip(b, 0.0, 1.0)))
    return out_pair, ChangeMask(np.clip(m, 0.0, 1.0), mask.binarize_threshold)


def apply_bg_aware(pair: ImagePair, background: BackgroundPair, mask: ChangeMask) -> ImagePair:
    """Composite the pair over the background pair through the mask."""
    if pair.shape != background.shape:
        raise ValueError(
            f"pair and background disagree in shape: {pair.shape} vs {background.shape}"
        )
    if pair.first.data.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match pair {pair.shape}")
    m = mask.data[:, :, None]
    a = _rep_arrays(pair.first.data, background.first.data, m)
    b = _rep_arrays(pair.second.data, background.second.data, m)
    return ImagePair(Image(np.clip(a, 0.0, 1.0)), Image(np.clip(b, 0.0, 1.0)))


def apply_chain(
    chain: OpChain,
    pair: ImagePair,
    background: BackgroundPair,
    mask: ChangeMask,
    cotransform_mask: bool = True,
) -> ImagePair:
    """Apply a chain's ops left to right.

    A working copy of the mask follows geometric transforms (unless
    cotransform_mask is False, which composites through the mask in its
    original frame). The caller's mask is never mutated.
    """
    if pair.shape != background.shape:
        raise ValueError(
            f"pair and background disagree in shape: {pair.shape} vs {background.shape}"
        )
    if pair.first.data.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match pair {pair.shape}")
    a, b = _chain_arrays(
        chain,
        pair.first.data,
        pair.second.data,
        background.first.data,
        background.second.data,
        mask.data,
        cotransform_mask=cotransform_mask,
    )
    return ImagePair(Image(np.clip(a, 0.0, 1.0)), Image(np.clip(b, 0.0, 1.0)))
