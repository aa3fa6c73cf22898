"""Mask-guided compositing of image pairs with background pairs.

The core primitive keeps an image inside the mask and substitutes a
background outside it. Applied twice with roles swapped it yields two
complementary training pairs: one that preserves the changed regions
over a new background, and one that plants the original background's
content into the background pair (which must then read as unchanged).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import BackgroundPair, ChangeMask, Image, ImagePair

__all__ = ["SynthesizedPairs", "rep", "synthesize"]


def _rep_arrays(fg: np.ndarray, bg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # Literal fg*m + bg*(1-m): exact at binary mask values, which the
    # foreground-preservation guarantee relies on.
    return fg * mask + bg * (1.0 - mask)


@dataclass(frozen=True)
class SynthesizedPairs:
    """Both composites produced from one (pair, background, mask) triple."""

    changed_prime: ImagePair
    background_prime: BackgroundPair


def rep(image: Image, background: Image, mask: ChangeMask) -> Image:
    """Composite: image inside the mask, background outside.

    Soft masks interpolate linearly; no pre-binarization happens here.
    """
    if image.shape != background.shape:
        raise ValueError(
            f"compositing inputs disagree in shape: {image.shape} vs {background.shape}"
        )
    if image.data.shape[:2] != mask.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match image plane {image.data.shape[:2]}"
        )
    out = _rep_arrays(image.data, background.data, mask.data[:, :, None])
    return Image(np.clip(out, 0.0, 1.0))


def synthesize(pair: ImagePair, background: BackgroundPair, mask: ChangeMask) -> SynthesizedPairs:
    """Build the changed-over-new-background pair and its complement.

    changed_prime keeps the pair's masked content over the background
    pair; background_prime plants the background pair's masked content
    into the original pair, producing a pseudo no-change pair.
    """
    changed = ImagePair(
        rep(pair.first, background.first, mask),
        rep(pair.second, background.second, mask),
    )
    background_like = BackgroundPair(
        rep(background.first, pair.first, mask),
        rep(background.second, pair.second, mask),
    )
    return SynthesizedPairs(changed_prime=changed, background_prime=background_like)
