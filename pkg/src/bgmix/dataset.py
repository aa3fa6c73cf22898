"""Dataset mechanics: tiling, change pasting, enrichment, synthetic
scenes, and the on-disk layout.

A dataset directory holds ``pairs/<id>_t1.png`` and ``pairs/<id>_t2.png``
for each item, optional ``masks/<id>.png``, and a ``labels.csv`` with
one ``id,label`` row per item (label 1 marks pairs containing object
changes).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import (
    BackgroundPair,
    ChangeMask,
    Image,
    ImagePair,
    load_image,
    save_image,
)

__all__ = [
    "Tile",
    "tile",
    "paste_changes",
    "transform_pair",
    "enrich",
    "SceneSpec",
    "generate_scene",
    "DatasetItem",
    "save_dataset",
    "load_dataset",
    "load_backgrounds",
]


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class Tile:
    """One crop plus its top-left origin in the source frame."""

    pair: ImagePair
    mask: ChangeMask | None
    y: int
    x: int


def _tile_starts(extent: int, size: int) -> list[int]:
    # Non-overlapping grid; a ragged final tile snaps inward so every
    # tile is full-size. Yields ceil(extent / size) starts.
    if size > extent:
        raise ValueError(f"tile size {size} exceeds image extent {extent}")
    starts = list(range(0, extent - size + 1, size))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def tile(pair: ImagePair, mask: ChangeMask | None, size: int = 256) -> list[Tile]:
    """Cut a pair (and optional mask) into aligned square tiles."""
    if mask is not None and pair.first.data.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match pair {pair.shape}")
    h, w = pair.first.height, pair.first.width
    tiles = []
    for y in _tile_starts(h, size):
        for x in _tile_starts(w, size):
            sub_pair = ImagePair(
                Image(pair.first.data[y : y + size, x : x + size]),
                Image(pair.second.data[y : y + size, x : x + size]),
            )
            sub_mask = None
            if mask is not None:
                sub_mask = ChangeMask(
                    mask.data[y : y + size, x : x + size], mask.binarize_threshold
                )
            tiles.append(Tile(pair=sub_pair, mask=sub_mask, y=y, x=x))
    return tiles


# ---------------------------------------------------------------------------
# pasting changes onto background pairs


def paste_changes(
    pair: ImagePair,
    mask: ChangeMask,
    background: BackgroundPair,
    rng: np.random.Generator,
) -> tuple[ImagePair, ChangeMask]:
    """Plant a pair's changed regions into a background pair.

    The mask support's bounding box is placed at a uniformly drawn
    valid offset (x drawn first, then y); the returned mask is the
    translated support. Soft mask values transfer content as alpha.
    """
    if pair.shape != background.shape:
        raise ValueError(
            f"pair and background disagree in shape: {pair.shape} vs {background.shape}"
        )
    support = mask.binarize()
    if not support.any():
        raise ValueError("mask has no support to paste")
    ys, xs = np.nonzero(support)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    bh, bw = y1 - y0, x1 - x0
    h, w = mask.shape
    tx = int(rng.integers(0, w - bw + 1))
    ty = int(rng.integers(0, h - bh + 1))

    shifted = np.zeros((h, w))
    shifted[ty : ty + bh, tx : tx + bw] = mask.data[y0:y1, x0:x1]
    alpha = shifted[:, :, None]

    def _plant(fg: Image, bg: Image) -> Image:
        patch = np.zeros_like(bg.data)
        patch[ty : ty + bh, tx : tx + bw] = fg.data[y0:y1, x0:x1]
        return Image(np.clip(bg.data * (1.0 - alpha) + patch * alpha, 0.0, 1.0))

    out = ImagePair(
        _plant(pair.first, background.first),
        _plant(pair.second, background.second),
    )
    return out, ChangeMask(shifted, mask.binarize_threshold)


# ---------------------------------------------------------------------------
# enrichment


def transform_pair(
    pair: ImagePair,
    mask: ChangeMask | None,
    flip_h: bool,
    flip_v: bool,
    scale: np.ndarray,
    offset: np.ndarray,
) -> tuple[ImagePair, ChangeMask | None]:
    """Deterministic enrichment core: flips plus per-channel affine
    jitter v -> scale * v + offset, identical for both images."""
    channels = pair.first.channels
    scale = np.asarray(scale, dtype=np.float64).reshape(1, 1, channels)
    offset = np.asarray(offset, dtype=np.float64).reshape(1, 1, channels)

    def _one(img: Image) -> Image:
        arr = img.data
        if flip_h:
            arr = arr[:, ::-1]
        if flip_v:
            arr = arr[::-1, :]
        return Image(np.clip(arr * scale + offset, 0.0, 1.0))

    out_pair = ImagePair(_one(pair.first), _one(pair.second))
    out_mask = mask
    if mask is not None:
        m = mask.data
        if flip_h:
            m = m[:, ::-1]
        if flip_v:
            m = m[::-1, :]
        out_mask = ChangeMask(m, mask.binarize_threshold)
    return out_pair, out_mask


def enrich(
    pair: ImagePair,
    mask: ChangeMask | None,
    label: int,
    rng: np.random.Generator,
    count: int = 1,
) -> list[tuple[ImagePair, ChangeMask | None, int]]:
    """Random flips and mild photometric jitter; labels are preserved.

    Per variant the draws are: horizontal flip, vertical flip, then a
    per-channel scale in [0.8, 1.2] and offset in [-0.2, 0.2] shared by
    both images.
    """
    channels = pair.first.channels
    out = []
    for _ in range(count):
        flip_h = bool(rng.integers(2))
        flip_v = bool(rng.integers(2))
        scale = rng.uniform(0.8, 1.2, size=channels)
        offset = rng.uniform(-0.2, 0.2, size=channels)
        new_pair, new_mask = transform_pair(pair, mask, flip_h, flip_v, scale, offset)
        out.append((new_pair, new_mask, label))
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic before/after scene.

    The background is a smooth random field plus fine texture noise,
    lifted by a per-scene brightness level common to both timestamps;
    the second timestamp differs by a regime-dependent photometric
    change. Objects (high-contrast rectangles and ellipses) appear in
    exactly one timestamp and define the ground-truth mask. Regimes:

    * 0: mild global brightness shift;
    * 1: strong brightness shift plus a smooth illumination gradient;
    * 2: patchy illumination blotches plus a brightness shift.
    """

    size: int = 64
    channels: int = 1
    n_objects: tuple[int, int] = (1, 3)
    regime: int = 0
    object_contrast: tuple[float, float] = (0.3, 0.5)
    texture_noise: float = 0.02
    level_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.size < 16:
            raise ValueError("scene size must be at least 16")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.regime not in (0, 1, 2):
            raise ValueError("regime must be 0, 1 or 2")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ValueError(f"bad object count range {self.n_objects}")
        if self.texture_noise < 0 or self.level_jitter < 0:
            raise ValueError("noise and jitter amplitudes must be nonnegative")


def _smooth_field(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    """Coarse random grid upsampled bilinearly to a smooth field."""
    nodes = 5
    grid = rng.uniform(0.3, 0.6, size=(nodes, nodes, channels))
    pos = np.linspace(0, nodes - 1, size)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, nodes - 1)
    frac = pos - lo
    rows = grid[lo] * (1 - frac)[:, None, None] + grid[hi] * frac[:, None, None]
    cols = (
        rows[:, lo] * (1 - frac)[None, :, None] + rows[:, hi] * frac[None, :, None]
    )
    return cols


def generate_scene(
    spec: SceneSpec, base_field: np.ndarray | None = None
) -> tuple[ImagePair, ChangeMask, int]:
    """Render one scene; returns (pair, ground-truth mask, label).

    With a base_field, the scene becomes a lightly perturbed view of
    that shared canvas, the way one region photographed repeatedly
    yields aligned backgrounds. Sets built this way keep composites
    structurally close to their sources, which the area-rate prior in
    the structural loss relies on.
    """
    rng = np.random.default_rng(spec.seed)
    size, channels = spec.size, spec.channels

    drawn = _smooth_field(rng, size, channels)
    if base_field is None:
        base = drawn
    else:
        if base_field.shape != (size, size, channels):
            raise ValueError(
                f"base field shape {base_field.shape} does not match spec "
                f"({size}, {size}, {channels})"
            )
        base = base_field + 0.2 * (drawn - 0.45)
    texture = rng.normal(0.0, spec.texture_noise, size=(size, size, channels))
    level = rng.uniform(-spec.level_jitter, spec.level_jitter)
    first = base + texture + level

    if spec.regime == 0:
        shift = rng.uniform(-0.04, 0.04)
        second = first + shift
    elif spec.regime == 1:
        shift = rng.uniform(0.12, 0.2) * (1 if rng.integers(2) else -1)
        gy = rng.uniform(-0.15, 0.15)
        gx = rng.uniform(-0.15, 0.15)
        ramp = (
            gy * np.linspace(-0.5, 0.5, size)[:, None, None]
            + gx * np.linspace(-0.5, 0.5, size)[None, :, None]
        )
        second = first + shift + ramp
    else:
        shift = rng.uniform(0.08, 0.16) * (1 if rng.integers(2) else -1)
        blotches = np.zeros((size, size, 1))
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(2, 4))):
            cy = rng.uniform(0, size)
            cx = rng.uniform(0, size)
            radius = rng.uniform(2.5, 6.0)
            amp = rng.uniform(0.18, 0.28) * (1 if rng.integers(2) else -1)
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            blotches[:, :, 0] += amp * np.exp(-d2 / (2.0 * radius**2))
        second = first + shift + blotches

    gt = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    arr_first = first.copy()
    arr_second = second.copy()
    for _ in range(n):
        extent_y = int(rng.integers(6, 15))
        extent_x = int(rng.integers(6, 15))
        oy = int(rng.integers(0, size - extent_y + 1))
        ox = int(rng.integers(0, size - extent_x + 1))
        contrast = rng.uniform(*spec.object_contrast) * (1 if rng.integers(2) else -1)
        shape_kind = int(rng.integers(2))
        yy, xx = np.mgrid[0:extent_y, 0:extent_x]
        if shape_kind == 0:
            support = np.ones((extent_y, extent_x), dtype=bool)
        else:
            cy, cx = (extent_y - 1) / 2.0, (extent_x - 1) / 2.0
            support = ((yy - cy) / (extent_y / 2.0)) ** 2 + (
                (xx - cx) / (extent_x / 2.0)
            ) ** 2 <= 1.0
        target = arr_second if rng.integers(2) else arr_first
        region = target[oy : oy + extent_y, ox : ox + extent_x]
        region[support] = np.clip(region[support] + contrast, 0.0, 1.0)
        gt[oy : oy + extent_y, ox : ox + extent_x] |= support

    pair = ImagePair(
        Image(np.clip(arr_first, 0.0, 1.0)),
        Image(np.clip(arr_second, 0.0, 1.0)),
    )
    label = int(n > 0)
    return pair, ChangeMask(gt.astype(np.float64)), label


# ---------------------------------------------------------------------------
# directory layout


@dataclass(frozen=True)
class DatasetItem:
    item_id: str
    pair: ImagePair
    mask: ChangeMask | None
    label: int


def save_dataset(items: Sequence[DatasetItem], root: str | Path) -> None:
    """Write items under root: pairs/, masks/ (when present), labels.csv."""
    root = Path(root)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    has_masks = any(item.mask is not None for item in items)
    if has_masks:
        (root / "masks").mkdir(exist_ok=True)
    with open(root / "labels.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for item in items:
            save_image(item.pair.first, root / "pairs" / f"{item.item_id}_t1.png")
            save_image(item.pair.second, root / "pairs" / f"{item.item_id}_t2.png")
            if item.mask is not None:
                save_image(
                    Image(item.mask.data[:, :, None]),
                    root / "masks" / f"{item.item_id}.png",
                )
            writer.writerow([item.item_id, item.label])


def load_dataset(root: str | Path) -> list[DatasetItem]:
    """Read a dataset directory written by save_dataset."""
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"{labels_path} not found; not a dataset directory")
    items = []
    with open(labels_path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            item_id = row["id"]
            pair = ImagePair(
                load_image(root / "pairs" / f"{item_id}_t1.png"),
                load_image(root / "pairs" / f"{item_id}_t2.png"),
            )
            mask_path = root / "masks" / f"{item_id}.png"
            mask = None
            if mask_path.exists():
                mask = ChangeMask(load_image(mask_path).data[:, :, 0])
            items.append(
                DatasetItem(item_id=item_id, pair=pair, mask=mask, label=int(row["label"]))
            )
    return items


def load_backgrounds(root: str | Path) -> list[BackgroundPair]:
    """Load a dataset directory as background pairs (labels ignored)."""
    return [
        BackgroundPair(item.pair.first, item.pair.second) for item in load_dataset(root)
    ]
