"""A deliberately small change detector trainable without backprop.

The forward pass is sigmoid(gain * smooth(sum_c w_c * |I1 - I2|_c +
bias)) where smooth is two learned 3x3 convolutions with mirrored
borders. With one or three channels that is 21 or 23 scalars, few
enough for finite-difference gradients to stay affordable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import cv2, njit
from .imaging import ChangeMask, ImagePair

__all__ = ["ToyDetector"]

_MASK_EPS = 1e-12  # keeps predictions strictly inside (0, 1)

if njit is not None:

    @njit(cache=True, fastmath={"reassoc", "contract", "nsz"})
    def _squash_kernel(pre, gain, eps, out):  # pragma: no cover - jitted
        j, h, w = pre.shape
        for n in range(j):
            g = gain[n]
            for y in range(h):
                for x in range(w):
                    v = 1.0 / (1.0 + np.exp(-g * pre[n, y, x]))
                    if v < eps:
                        v = eps
                    elif v > 1.0 - eps:
                        v = 1.0 - eps
                    out[n, y, x] = v


def _conv3x3_batch(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Per-row 3x3 correlation with mirrored borders.

    x is (J, H, W) and kernels (J, 3, 3); row j is filtered with its
    own kernel, so every parameter perturbation in a finite difference
    sweep runs in one call. cv2 does the slice loop an order of
    magnitude faster than the windowed-einsum fallback.
    """
    if cv2 is not None and min(x.shape[-2], x.shape[-1]) >= 3:
        xc = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty_like(xc)
        for j in range(xc.shape[0]):
            cv2.filter2D(xc[j], -1, kernels[j], out[j], borderType=cv2.BORDER_REFLECT_101)
        return out
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    return np.einsum("jhwab,jab->jhw", windows, kernels, optimize=True)


def _forward_batch(theta: np.ndarray, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Forward pass for a (J, n) parameter matrix.

    first/second are (H, W, C) or (J, H, W, C); the output is (J, H, W)
    clamped to the open unit interval.
    """
    j = theta.shape[0]
    diff = np.abs(first - second)
    channels = diff.shape[-1]
    cw = theta[:, :channels]
    k1 = theta[:, channels : channels + 9].reshape(j, 3, 3)
    k2 = theta[:, channels + 9 : channels + 18].reshape(j, 3, 3)
    gain = theta[:, channels + 18]
    bias = theta[:, channels + 19]
    if diff.ndim == 3:
        weighted = np.einsum("jc,hwc->jhw", cw, diff, optimize=True)
    else:
        weighted = np.einsum("jc,jhwc->jhw", cw, diff, optimize=True)
    pre = _conv3x3_batch(weighted + bias[:, None, None], k1)
    pre = _conv3x3_batch(pre, k2)
    if njit is not None:
        out = np.empty_like(pre)
        _squash_kernel(np.ascontiguousarray(pre), np.ascontiguousarray(gain), _MASK_EPS, out)
        return out
    z = gain[:, None, None] * pre
    out = 1.0 / (1.0 + np.exp(-z))
    return np.clip(out, _MASK_EPS, 1.0 - _MASK_EPS)


@dataclass
class ToyDetector:
    """Mutable parameter bundle plus the forward pass."""

    channel_weights: np.ndarray
    kernel1: np.ndarray
    kernel2: np.ndarray
    gain: float
    bias: float

    def __post_init__(self) -> None:
        self.channel_weights = np.asarray(self.channel_weights, dtype=np.float64).ravel()
        self.kernel1 = np.asarray(self.kernel1, dtype=np.float64).reshape(3, 3)
        self.kernel2 = np.asarray(self.kernel2, dtype=np.float64).reshape(3, 3)
        self.gain = float(self.gain)
        self.bias = float(self.bias)
        if self.channel_weights.shape[0] not in (1, 3):
            raise ValueError("channel weights must have length 1 or 3")

    @classmethod
    def default(cls, channels: int = 1) -> "ToyDetector":
        """Documented initialization: uniform channel weights, box
        smoothing kernels, gain 10, bias -0.5."""
        if channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        return cls(
            channel_weights=np.full(channels, 1.0 / channels),
            kernel1=np.full((3, 3), 1.0 / 9.0),
            kernel2=np.full((3, 3), 1.0 / 9.0),
            gain=10.0,
            bias=-0.5,
        )

    @property
    def channels(self) -> int:
        return self.channel_weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.channels + 20

    def param_names(self) -> list[str]:
        names = [f"w{c}" for c in range(self.channels)]
        names += [f"k1_{r}{c}" for r in range(3) for c in range(3)]
        names += [f"k2_{r}{c}" for r in range(3) for c in range(3)]
        names += ["gain", "bias"]
        return names

    def to_vector(self) -> np.ndarray:
        """Flat parameter vector in the documented order:
        channel weights, kernel1 row-major, kernel2 row-major, gain, bias."""
        return np.concatenate(
            [
                self.channel_weights,
                self.kernel1.ravel(),
                self.kernel2.ravel(),
                [self.gain, self.bias],
            ]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray, channels: int) -> "ToyDetector":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.shape[0] != channels + 20:
            raise ValueError(f"expected {channels + 20} params, got {vec.shape[0]}")
        return cls(
            channel_weights=vec[:channels],
            kernel1=vec[channels : channels + 9],
            kernel2=vec[channels + 9 : channels + 18],
            gain=vec[channels + 18],
            bias=vec[channels + 19],
        )

    def set_vector(self, vec: np.ndarray) -> None:
        fresh = ToyDetector.from_vector(vec, self.channels)
        self.channel_weights = fresh.channel_weights
        self.kernel1 = fresh.kernel1
        self.kernel2 = fresh.kernel2
        self.gain = fresh.gain
        self.bias = fresh.bias

    def predict(self, pair: ImagePair) -> ChangeMask:
        """Soft change mask, strictly inside (0, 1)."""
        if pair.first.channels != self.channels:
            raise ValueError(
                f"detector expects {self.channels}-channel input, got {pair.first.channels}"
            )
        out = _forward_batch(
            self.to_vector()[None, :], pair.first.data, pair.second.data
        )[0]
        return ChangeMask(out)

    def save_text(self, path: str | Path) -> None:
        """Checkpoint as 'name value' lines, one parameter per line."""
        lines = [
            f"{name} {float(value)!r}"
            for name, value in zip(self.param_names(), self.to_vector())
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load_text(cls, path: str | Path) -> "ToyDetector":
        entries: dict[str, float] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, value = line.split()
            entries[name] = float(value)
        channels = sum(1 for name in entries if name.startswith("w"))
        probe = cls.default(channels)
        try:
            vec = np.array([entries[name] for name in probe.param_names()])
        except KeyError as exc:
            raise ValueError(f"checkpoint is missing parameter {exc}") from None
        return cls.from_vector(vec, channels)
