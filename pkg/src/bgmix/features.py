"""Pair descriptors standing in for a deep perception network.

The default descriptor summarizes three entities (both images and
their absolute difference) with per-channel means and variances, 8-bin
intensity histograms, and gradient-magnitude means pooled on 1x1, 2x2
and 4x4 grids. Histogram bins enter through their square roots
(Hellinger mapping), so a sparsely occupied bin still carries weight
in cosine comparisons; a change confined to a few percent of the
pixels would otherwise vanish next to the coordinates of order one.
Per entity that is 10 * C + 21 numbers, so a pair descriptor has
dimension 3 * (10 * C + 21): 93 for grayscale, 153 for RGB.

A file-backed extractor allows substituting precomputed vectors (for
example from an external deep network) keyed by a content digest of
the pair.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping, Protocol, runtime_checkable

import numpy as np

from ._accel import njit
from .imaging import Image, ImagePair, quantize_u8

__all__ = [
    "FeatureExtractor",
    "DefaultFeatureExtractor",
    "FileFeatureExtractor",
    "pair_digest",
    "descriptor_dimension",
]

_HIST_BINS = 8
_POOL_GRIDS = (1, 2, 4)


def descriptor_dimension(channels: int) -> int:
    """Descriptor length for a pair of images with that channel count."""
    per_entity = 2 * channels + _HIST_BINS * channels + sum(g * g for g in _POOL_GRIDS)
    return 3 * per_entity


def _entity_stats_numpy(arr: np.ndarray) -> np.ndarray:
    """Reference implementation of the per-entity stats vector."""
    h, w, c = arr.shape[-3], arr.shape[-2], arr.shape[-1]
    mean = arr.mean(axis=(-3, -2))
    var = arr.var(axis=(-3, -2))

    bins = np.minimum((arr * _HIST_BINS).astype(np.int64), _HIST_BINS - 1)
    flat = np.moveaxis(bins, -1, -3).reshape(-1, h * w)
    rows = flat.shape[0]
    offsets = np.arange(rows, dtype=np.int64)[:, None] * _HIST_BINS
    counts = np.bincount(
        (flat + offsets).ravel(), minlength=rows * _HIST_BINS
    ).reshape(rows, _HIST_BINS)
    hist = np.sqrt(counts.astype(np.float64) / (h * w))
    hist = hist.reshape(arr.shape[:-3] + (c * _HIST_BINS,))

    gray = arr.mean(axis=-1)
    dx = gray[..., :-1, 1:] - gray[..., :-1, :-1]
    dy = gray[..., 1:, :-1] - gray[..., :-1, :-1]
    gmag = np.sqrt(dx * dx + dy * dy)
    pools = []
    gh, gw = gmag.shape[-2], gmag.shape[-1]
    for grid in _POOL_GRIDS:
        ch = (gh // grid) * grid
        cw = (gw // grid) * grid
        block = gmag[..., :ch, :cw].reshape(
            gmag.shape[:-2] + (grid, ch // grid, grid, cw // grid)
        )
        pools.append(block.mean(axis=(-3, -1)).reshape(gmag.shape[:-2] + (grid * grid,)))
    return np.concatenate([mean, var, hist] + pools, axis=-1)


# SIMD-friendly float flags; approximate transcendentals stay off so
# the kernels track the numpy reference to near machine precision.
_FASTMATH = {"reassoc", "contract", "nsz"}

if njit is not None:

    @njit(cache=True, fastmath=_FASTMATH)
    def _slice_stats(img, gray, gmag, out, col0):  # pragma: no cover - jitted
        h, w, c = img.shape
        npix = h * w
        for ch in range(c):
            total = 0.0
            for y in range(h):
                for x in range(w):
                    total += img[y, x, ch]
            mu = total / npix
            sq = 0.0
            for y in range(h):
                for x in range(w):
                    d = img[y, x, ch] - mu
                    sq += d * d
            out[col0 + ch] = mu
            out[col0 + c + ch] = sq / npix
            base = col0 + 2 * c + ch * _HIST_BINS
            for b in range(_HIST_BINS):
                out[base + b] = 0.0
            for y in range(h):
                for x in range(w):
                    b = int(img[y, x, ch] * _HIST_BINS)
                    if b > _HIST_BINS - 1:
                        b = _HIST_BINS - 1
                    out[base + b] += 1.0
            for b in range(_HIST_BINS):
                out[base + b] = np.sqrt(out[base + b] / npix)
        for y in range(h):
            for x in range(w):
                total = 0.0
                for ch in range(c):
                    total += img[y, x, ch]
                gray[y, x] = total / c
        for y in range(h - 1):
            for x in range(w - 1):
                dx = gray[y, x + 1] - gray[y, x]
                dy = gray[y + 1, x] - gray[y, x]
                gmag[y, x] = np.sqrt(dx * dx + dy * dy)
        col = col0 + 2 * c + c * _HIST_BINS
        for grid in (1, 2, 4):
            bh = (h - 1) // grid
            bw = (w - 1) // grid
            for gy in range(grid):
                for gx in range(grid):
                    total = 0.0
                    for y in range(gy * bh, (gy + 1) * bh):
                        for x in range(gx * bw, (gx + 1) * bw):
                            total += gmag[y, x]
                    out[col] = total / (bh * bw)
                    col += 1

    @njit(cache=True, fastmath=_FASTMATH)
    def _entity_stats_fused(arr, out):  # pragma: no cover - jitted
        n_items, h, w, c = arr.shape
        gray = np.empty((h, w))
        gmag = np.empty((h - 1, w - 1))
        for n in range(n_items):
            _slice_stats(arr[n], gray, gmag, out[n], 0)

    @njit(cache=True, fastmath=_FASTMATH)
    def _pair_stats_fused(a, b, out):  # pragma: no cover - jitted
        n_items, h, w, c = out.shape[0], a.shape[1], a.shape[2], a.shape[3]
        na, nb = a.shape[0], b.shape[0]
        dim = out.shape[1] // 3
        gray = np.empty((h, w))
        gmag = np.empty((h - 1, w - 1))
        diff = np.empty((h, w, c))
        for n in range(n_items):
            ia = n if na == n_items else 0
            ib = n if nb == n_items else 0
            _slice_stats(a[ia], gray, gmag, out[n], 0)
            _slice_stats(b[ib], gray, gmag, out[n], dim)
            for y in range(h):
                for x in range(w):
                    for ch in range(c):
                        diff[y, x, ch] = abs(a[ia, y, x, ch] - b[ib, y, x, ch])
            _slice_stats(diff, gray, gmag, out[n], 2 * dim)


def _entity_stats(arr: np.ndarray) -> np.ndarray:
    """Stats vector for one entity, shape (..., 10 * C + 21).

    Accepts leading batch dimensions. Needs at least 5x5 spatial extent
    so the 4x4 gradient pooling grid has content. Dispatches to a
    fused jit kernel when numba is importable; the numpy path is the
    reference the kernel is tested against.
    """
    h, w, c = arr.shape[-3], arr.shape[-2], arr.shape[-1]
    if h < 5 or w < 5:
        raise ValueError(f"descriptor needs at least 5x5 images, got {h}x{w}")
    if njit is None:
        return _entity_stats_numpy(arr)
    lead = arr.shape[:-3]
    flat = np.ascontiguousarray(arr, dtype=np.float64).reshape((-1, h, w, c))
    out = np.empty((flat.shape[0], 10 * c + 21))
    if flat.shape[0]:
        _entity_stats_fused(flat, out)
    return out.reshape(lead + (10 * c + 21,))


def describe_pair_arrays(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Descriptor over raw arrays; broadcasts leading batch dimensions."""
    fl, sl = first.shape[:-3], second.shape[:-3]
    kernel_ok = (
        njit is not None
        and first.shape[-3:] == second.shape[-3:]
        and min(first.shape[-3], first.shape[-2]) >= 5
        and (fl == sl or fl == () or sl == ())
    )
    if not kernel_ok:
        diff = np.abs(first - second)
        parts = [_entity_stats(first), _entity_stats(second), _entity_stats(diff)]
        lead = np.broadcast_shapes(*(p.shape[:-1] for p in parts))
        return np.concatenate(
            [np.broadcast_to(p, lead + p.shape[-1:]) for p in parts], axis=-1
        )
    h, w, c = first.shape[-3:]
    lead = sl if fl == () else fl
    fa = np.ascontiguousarray(first, dtype=np.float64).reshape((-1, h, w, c))
    sa = np.ascontiguousarray(second, dtype=np.float64).reshape((-1, h, w, c))
    out = np.empty((max(fa.shape[0], sa.shape[0]), descriptor_dimension(c)))
    _pair_stats_fused(fa, sa, out)
    return out.reshape(lead + (out.shape[-1],))


@runtime_checkable
class FeatureExtractor(Protocol):
    """Maps an image pair to a fixed-length feature vector."""

    def extract(self, first: Image, second: Image) -> np.ndarray: ...


class DefaultFeatureExtractor:
    """The handcrafted descriptor; deterministic and training-free."""

    def extract(self, first: Image, second: Image) -> np.ndarray:
        if first.shape != second.shape:
            raise ValueError(f"pair shapes disagree: {first.shape} vs {second.shape}")
        return describe_pair_arrays(first.data, second.data)

    def extract_pair(self, pair: ImagePair) -> np.ndarray:
        return self.extract(pair.first, pair.second)

    @staticmethod
    def dimension(channels: int) -> int:
        return descriptor_dimension(channels)


def pair_digest(first: Image, second: Image) -> str:
    """Content digest of a pair: shapes plus 8-bit quantized pixels."""
    h = hashlib.sha256()
    for img in (first, second):
        h.update(np.asarray(img.shape, dtype=np.int64).tobytes())
        h.update(quantize_u8(img.data).tobytes())
    return h.hexdigest()


class FileFeatureExtractor:
    """Lookup extractor over precomputed vectors keyed by pair digest.

    The table typically comes from an .npz archive whose keys are the
    hex digests produced by pair_digest.
    """

    def __init__(self, table: Mapping[str, np.ndarray]):
        self._table = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in table.items()}
        if not self._table:
            raise ValueError("feature table is empty")
        dims = {v.shape[0] for v in self._table.values()}
        if len(dims) != 1:
            raise ValueError(f"feature table has mixed dimensions: {sorted(dims)}")

    @classmethod
    def from_npz(cls, path: str | Path) -> "FileFeatureExtractor":
        with np.load(Path(path)) as archive:
            return cls({k: archive[k] for k in archive.files})

    def extract(self, first: Image, second: Image) -> np.ndarray:
        digest = pair_digest(first, second)
        try:
            return self._table[digest]
        except KeyError:
            raise KeyError(
                f"no precomputed features for pair digest {digest}; "
                f"table holds {len(self._table)} entries"
            ) from None
