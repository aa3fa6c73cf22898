"""Consistency losses tying detector predictions to composited pairs.

Five terms feed the training objective:

1. feature-cosine distance between the original and augmented pair;
2. feature-cosine distances between each pair and its composite;
3. structural distance (1 - SSIM - L1) between originals and their
   changed-over-background composites;
4. adversarial realism scores from two logistic discriminators, one
   for changed pairs and one for background pairs;
5. squared prediction mass on the background pair, which should read
   as change-free.

Terms 2..5 are evaluated on both the real branch and the augmented
branch and combined with per-term weights; term 1 links the branches.

SSIM uses an 11-tap Gaussian window (sigma 1.5) with mirrored borders
and the usual stabilizers for unit data range. Identical inputs score
exactly 1.0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from ._accel import cv2, njit
from .compositing import SynthesizedPairs, synthesize
from .features import DefaultFeatureExtractor, FeatureExtractor
from .imaging import BackgroundPair, ChangeMask, Image, ImagePair

__all__ = [
    "LossWeights",
    "BranchTerms",
    "LossReport",
    "Discriminator",
    "ssim",
    "l1_distance",
    "cosine_distance",
    "lcon1",
    "lcon2",
    "lcon3",
    "lcon4",
    "lcon5",
    "lcon",
    "total_loss",
]

logger = logging.getLogger(__name__)

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SCORE_EPS = 1e-6


class MaskPredictor(Protocol):
    """Anything that predicts a change mask for an image pair."""

    def predict(self, pair: ImagePair) -> ChangeMask: ...


# ---------------------------------------------------------------------------
# weights and reports


_PROFILES = {
    "aicd": (1.0, 1.0, 5.0, 1.0, 0.01),
    "bcd": (1.0, 1.0, 3.0, 1.0, 0.01),
}


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights; defaults match the aerial-imagery profile."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 5.0
    lambda4: float = 1.0
    lambda5: float = 0.01

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def profile(cls, name: str) -> "LossWeights":
        """Named presets: 'aicd' (aerial) or 'bcd' (street-view)."""
        try:
            values = _PROFILES[name]
        except KeyError:
            raise ValueError(
                f"unknown weight profile {name!r}, expected one of {sorted(_PROFILES)}"
            ) from None
        return cls(*values)


@dataclass(frozen=True)
class BranchTerms:
    """Per-term values for one branch plus their weighted sum."""

    lcon2: float
    lcon3: float
    lcon4: float
    lcon5: float
    combined: float

    def to_dict(self) -> dict:
        return {
            "lcon2": self.lcon2,
            "lcon3": self.lcon3,
            "lcon4": self.lcon4,
            "lcon5": self.lcon5,
            "combined": self.combined,
        }


@dataclass(frozen=True)
class LossReport:
    """Full decomposition of the training objective.

    total always equals lambda1 * lcon1 + real.combined + aug.combined;
    consumers may rely on that identity.
    """

    lcon1: float
    real: BranchTerms
    aug: BranchTerms
    total: float

    def to_dict(self) -> dict:
        return {
            "lcon1": self.lcon1,
            "real": self.real.to_dict(),
            "aug": self.aug.to_dict(),
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LossReport":
        def branch(o: dict) -> BranchTerms:
            return BranchTerms(o["lcon2"], o["lcon3"], o["lcon4"], o["lcon5"], o["combined"])

        return cls(obj["lcon1"], branch(obj["real"]), branch(obj["aug"]), obj["total"])


# ---------------------------------------------------------------------------
# array cores (leading batch dimensions welcome)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """1 - cosine similarity along the last axis.

    If either vector has zero norm the distance is defined as 1 (the
    orthogonality convention) and the event is logged.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dot = (u * v).sum(axis=-1)
    nu = np.sqrt((u * u).sum(axis=-1))
    nv = np.sqrt((v * v).sum(axis=-1))
    denom = nu * nv
    degenerate = denom == 0.0
    if np.any(degenerate):
        logger.warning("cosine distance saw a zero-norm feature vector; returning 1.0")
    cos = np.where(degenerate, 0.0, dot / np.where(degenerate, 1.0, denom))
    return 1.0 - cos


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


_SSIM_KERNEL = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)


_SSIM_KERNEL_COL = _SSIM_KERNEL.reshape(-1, 1)


def _gfilter(arr: np.ndarray) -> np.ndarray:
    """Separable Gaussian over the two spatial axes of (..., H, W, C).

    cv2's separable filter is several times faster than the scipy
    fallback; both use mirrored borders and agree to rounding error.
    Small images go through scipy, whose mirroring is well defined
    when the window overhangs more than one reflection.
    """
    h, w = arr.shape[-3], arr.shape[-2]
    if cv2 is None or min(h, w) < _SSIM_WINDOW:
        out = ndimage.correlate1d(arr, _SSIM_KERNEL, axis=-3, mode="mirror")
        return ndimage.correlate1d(out, _SSIM_KERNEL, axis=-2, mode="mirror")
    flat = np.ascontiguousarray(arr, dtype=np.float64).reshape((-1,) + arr.shape[-3:])
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        cv2.sepFilter2D(
            flat[i],
            -1,
            _SSIM_KERNEL_COL,
            _SSIM_KERNEL_COL,
            out[i],
            borderType=cv2.BORDER_REFLECT_101,
        )
    return out.reshape(arr.shape)


def _ssim_arrays_numpy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean SSIM map; inputs broadcast against each other.

    Statistics are computed per input before broadcasting, so a shared
    reference image is only filtered once however many candidates it is
    compared against.
    """
    mu_x = _gfilter(x)
    mu_y = _gfilter(y)
    var_x = _gfilter(x * x) - mu_x * mu_x
    var_y = _gfilter(y * y) - mu_y * mu_y
    cov = _gfilter(np.multiply(x, y)) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return (num / den).mean(axis=(-3, -2, -1))


def _l1_arrays(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.abs(x - y).mean(axis=(-3, -2, -1))


if njit is not None:

    @njit(cache=True)
    def _ssim_l1_kernel(  # pragma: no cover - jitted
        x, y, mu_x, mu_y, sxx, syy, sxy, c1, c2, out_ssim, out_l1
    ):
        b, h, w, c = y.shape
        paired = x.shape[0] == b
        npix = h * w * c
        for n in range(b):
            i = n if paired else 0
            ssim_acc = 0.0
            l1_acc = 0.0
            for yy in range(h):
                for xx in range(w):
                    for ch in range(c):
                        mx = mu_x[i, yy, xx, ch]
                        my = mu_y[n, yy, xx, ch]
                        vx = sxx[i, yy, xx, ch] - mx * mx
                        vy = syy[n, yy, xx, ch] - my * my
                        cov = sxy[n, yy, xx, ch] - mx * my
                        num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
                        den = (mx * mx + my * my + c1) * (vx + vy + c2)
                        ssim_acc += num / den
                        l1_acc += abs(x[i, yy, xx, ch] - y[n, yy, xx, ch])
            out_ssim[n] = ssim_acc / npix
            out_l1[n] = l1_acc / npix


def _ssim_l1_arrays(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean SSIM and mean absolute error in one pass over the map.

    Handles an unbatched input on either side against a batch on the
    other; anything fancier falls back to plain broadcasting.
    """
    xl, yl = x.shape[:-3], y.shape[:-3]
    kernel_ok = (
        njit is not None
        and x.shape[-3:] == y.shape[-3:]
        and (xl == yl or xl == () or yl == ())
    )
    if not kernel_ok:
        return _ssim_arrays_numpy(x, y), _l1_arrays(x, y)
    if yl == () and xl != ():  # SSIM and L1 are symmetric; batch drives the loop
        x, y = y, x
        xl, yl = yl, xl
    spatial = x.shape[-3:]
    xf = np.ascontiguousarray(x, dtype=np.float64).reshape((-1,) + spatial)
    yf = np.ascontiguousarray(y, dtype=np.float64).reshape((-1,) + spatial)
    mu_x = _gfilter(xf)
    mu_y = _gfilter(yf)
    sxx = _gfilter(xf * xf)
    syy = _gfilter(yf * yf)
    sxy = _gfilter(xf * yf)
    out_ssim = np.empty(yf.shape[0])
    out_l1 = np.empty(yf.shape[0])
    _ssim_l1_kernel(xf, yf, mu_x, mu_y, sxx, syy, sxy, _SSIM_C1, _SSIM_C2, out_ssim, out_l1)
    return out_ssim.reshape(yl), out_l1.reshape(yl)


def _ssim_arrays(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return _ssim_l1_arrays(x, y)[0]


# ---------------------------------------------------------------------------
# public losses


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM between two images of identical shape.

    Borders are handled by mirrored padding, so images smaller than
    the 11-tap window are still well defined.
    """
    if a.shape != b.shape:
        raise ValueError(f"ssim inputs disagree in shape: {a.shape} vs {b.shape}")
    return float(_ssim_arrays(a.data, b.data))


def l1_distance(a: Image, b: Image) -> float:
    """Mean absolute pixel difference."""
    if a.shape != b.shape:
        raise ValueError(f"l1 inputs disagree in shape: {a.shape} vs {b.shape}")
    return float(_l1_arrays(a.data, b.data))


def lcon1(pair: ImagePair, aug_pair: ImagePair, extractor: FeatureExtractor) -> float:
    """Feature-cosine distance between original and augmented pair, in [0, 2]."""
    f_pair = extractor.extract(pair.first, pair.second)
    f_aug = extractor.extract(aug_pair.first, aug_pair.second)
    return float(cosine_distance(f_pair, f_aug))


def lcon2(
    pair: ImagePair,
    background: BackgroundPair,
    synth: SynthesizedPairs,
    extractor: FeatureExtractor,
) -> float:
    """Feature agreement of each pair with its composite counterpart."""
    d_changed = cosine_distance(
        extractor.extract(pair.first, pair.second),
        extractor.extract(synth.changed_prime.first, synth.changed_prime.second),
    )
    d_background = cosine_distance(
        extractor.extract(background.first, background.second),
        extractor.extract(synth.background_prime.first, synth.background_prime.second),
    )
    return float(d_changed + d_background)


def lcon3(pair: ImagePair, changed_prime: ImagePair) -> float:
    """Structural agreement between originals and their composites.

    Sum over both timestamps of 1 - SSIM - L1; can go negative when a
    composite diverges strongly, which is the intended pressure.
    """
    total = 0.0
    for orig, comp in ((pair.first, changed_prime.first), (pair.second, changed_prime.second)):
        total += 1.0 - ssim(orig, comp) - l1_distance(orig, comp)
    return total


class Discriminator:
    """Logistic realism scorer over pair descriptors.

    Starts indifferent (zero weights, score 0.5 everywhere) and takes
    one gradient-ascent step per training iteration on the adversarial
    objective. Scores are clamped away from {0, 1} so the log terms
    stay finite.
    """

    def __init__(self, dim: int, extractor: FeatureExtractor | None = None):
        if dim < 1:
            raise ValueError("feature dimension must be positive")
        self.weights = np.zeros(dim, dtype=np.float64)
        self.bias = 0.0
        self.extractor = extractor if extractor is not None else DefaultFeatureExtractor()

    def score_features(self, feats: np.ndarray) -> np.ndarray:
        """Clamped sigmoid score; accepts (..., dim) batches."""
        z = np.asarray(feats, dtype=np.float64) @ self.weights + self.bias
        s = 1.0 / (1.0 + np.exp(-z))
        return np.clip(s, _SCORE_EPS, 1.0 - _SCORE_EPS)

    def score(self, pair: ImagePair) -> float:
        feats = self.extractor.extract(pair.first, pair.second)
        return float(self.score_features(feats))

    def ascent_step(
        self, real_feats: np.ndarray, synth_feats: np.ndarray, learning_rate: float
    ) -> None:
        """One ascent step on sum(log s(real)) + sum(log(1 - s(synth))).

        Inputs are (N, dim) stacks. The update uses unclamped sigmoid
        gradients, which are bounded and need no stabilizer.
        """
        real = np.atleast_2d(np.asarray(real_feats, dtype=np.float64))
        synth = np.atleast_2d(np.asarray(synth_feats, dtype=np.float64))
        s_real = 1.0 / (1.0 + np.exp(-(real @ self.weights + self.bias)))
        s_synth = 1.0 / (1.0 + np.exp(-(synth @ self.weights + self.bias)))
        grad_w = (1.0 - s_real) @ real - s_synth @ synth
        grad_b = float((1.0 - s_real).sum() - s_synth.sum())
        self.weights = self.weights + learning_rate * grad_w
        self.bias = self.bias + learning_rate * grad_b


def lcon4(
    pair: ImagePair,
    background: BackgroundPair,
    synth: SynthesizedPairs,
    d_changed: Discriminator,
    d_background: Discriminator,
) -> float:
    """Adversarial realism: log-likelihood of real pairs minus composites.

    The trainer descends this literal form; once a discriminator
    confidently rejects a composite the term's gradient toward the
    detector vanishes.
    """
    s_real = d_changed.score(pair)
    s_synth = d_changed.score(synth.changed_prime)
    s_bg = d_background.score(background)
    s_bg_synth = d_background.score(synth.background_prime)
    return float(
        np.log(s_real) + np.log(1.0 - s_synth) + np.log(s_bg) + np.log(1.0 - s_bg_synth)
    )


def lcon5(background_mask: ChangeMask) -> float:
    """Mean squared prediction on a background pair (target: all zero)."""
    return float(np.mean(background_mask.data**2))


def lcon(
    pair: ImagePair,
    background: BackgroundPair,
    synth: SynthesizedPairs,
    background_mask: ChangeMask,
    extractor: FeatureExtractor,
    d_changed: Discriminator,
    d_background: Discriminator,
    weights: LossWeights,
) -> float:
    """Weighted per-branch bundle of terms 2..5."""
    return (
        weights.lambda2 * lcon2(pair, background, synth, extractor)
        + weights.lambda3 * lcon3(pair, synth.changed_prime)
        + weights.lambda4 * lcon4(pair, background, synth, d_changed, d_background)
        + weights.lambda5 * lcon5(background_mask)
    )


def _branch_terms(
    pair: ImagePair,
    background: BackgroundPair,
    synth: SynthesizedPairs,
    background_mask: ChangeMask,
    extractor: FeatureExtractor,
    d_changed: Discriminator,
    d_background: Discriminator,
    weights: LossWeights,
) -> BranchTerms:
    t2 = lcon2(pair, background, synth, extractor)
    t3 = lcon3(pair, synth.changed_prime)
    t4 = lcon4(pair, background, synth, d_changed, d_background)
    t5 = lcon5(background_mask)
    combined = (
        weights.lambda2 * t2 + weights.lambda3 * t3 + weights.lambda4 * t4 + weights.lambda5 * t5
    )
    return BranchTerms(t2, t3, t4, t5, combined)


def total_loss(
    pair: ImagePair,
    aug_pair: ImagePair,
    background: BackgroundPair,
    detector: MaskPredictor,
    extractor: FeatureExtractor,
    d_changed: Discriminator,
    d_background: Discriminator,
    weights: LossWeights,
) -> LossReport:
    """Full objective over both branches with per-term breakdown.

    The detector supplies masks for the real pair, the augmented pair
    and the background pair; each branch synthesizes its composites
    from its own mask. The background mask term appears in both
    branches, mirroring the per-branch bundle definition.
    """
    mask_real = detector.predict(pair)
    mask_aug = detector.predict(aug_pair)
    mask_bg = detector.predict(background)

    synth_real = synthesize(pair, background, mask_real)
    synth_aug = synthesize(aug_pair, background, mask_aug)

    real = _branch_terms(
        pair, background, synth_real, mask_bg, extractor, d_changed, d_background, weights
    )
    aug = _branch_terms(
        aug_pair, background, synth_aug, mask_bg, extractor, d_changed, d_background, weights
    )
    t1 = lcon1(pair, aug_pair, extractor)
    total = weights.lambda1 * t1 + real.combined + aug.combined
    return LossReport(lcon1=t1, real=real, aug=aug, total=total)
