"""K-path background-mixed augmentation.

A plan fixes every random choice up front: Dirichlet path weights, one
op chain per path (depth 1 to 3 drawn from the eight-op catalog), the
background drawn for each path, and the Beta weight that blends the
mixed result back toward the original pair. Applying a plan is fully
deterministic, which is what makes sidecar replay and the batched
trainer possible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import BackgroundPair, ChangeMask, Image, ImagePair
from .ops import GEOMETRIC_KINDS, OP_KINDS, AugOp, OpChain, _chain_arrays

__all__ = ["MixConfig", "MixPlan", "sample_plan", "apply_plan", "bgmix"]


@dataclass(frozen=True)
class MixConfig:
    """Knobs for plan sampling.

    Parameter ranges follow common augmentation practice: rotations up
    to 30 degrees, shear factors up to 0.3, translations up to a third
    of the image extent, posterize to 4..8 bits, solarize thresholds in
    [0.5, 1].
    """

    k_paths: int = 4
    dirichlet_alpha: float = 1.0
    beta_a: float = 1.0
    beta_b: float = 1.0
    chain_depth_max: int = 3
    op_set: tuple[str, ...] = OP_KINDS
    share_background: bool = False  # one background pair reused across paths
    cotransform_mask: bool = True  # geometric ops drag the working mask along
    rotate_max_deg: float = 30.0
    shear_max: float = 0.3
    translate_frac: float = 1.0 / 3.0
    posterize_bits_min: int = 4
    posterize_bits_max: int = 8
    solarize_min: float = 0.5
    solarize_max: float = 1.0

    def __post_init__(self) -> None:
        if not 2 <= self.k_paths <= 6:
            raise ValueError(f"k_paths must be in [2, 6], got {self.k_paths}")
        if self.chain_depth_max != 3:
            raise ValueError("chain depth is fixed at 3")
        if self.dirichlet_alpha <= 0 or self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("distribution parameters must be positive")
        ops = tuple(self.op_set)
        if not ops:
            raise ValueError("op_set must not be empty")
        unknown = [k for k in ops if k not in OP_KINDS]
        if unknown:
            raise ValueError(f"unknown op kinds {unknown}")
        object.__setattr__(self, "op_set", ops)

    def drop_op(self, kind: str) -> "MixConfig":
        """Config with one op kind removed from the sampling pool."""
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        remaining = tuple(k for k in self.op_set if k != kind)
        if not remaining:
            raise ValueError(f"dropping {kind!r} would leave no ops")
        return replace(self, op_set=remaining)


@dataclass(frozen=True)
class MixPlan:
    """Every random draw needed to reproduce one augmentation."""

    path_weights: tuple[float, ...]
    chains: tuple[OpChain, ...]
    bg_indices: tuple[int, ...]
    blend_weight: float
    rng_seed: int | None = None

    def __post_init__(self) -> None:
        weights = tuple(float(w) for w in self.path_weights)
        if len(weights) != len(self.chains) or len(weights) != len(self.bg_indices):
            raise ValueError("plan weights, chains and bg indices must align")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"path weights must sum to 1, got {sum(weights)}")
        if any(w < 0 for w in weights):
            raise ValueError("path weights must be nonnegative")
        if not 0.0 <= self.blend_weight <= 1.0:
            raise ValueError(f"blend weight outside [0, 1]: {self.blend_weight}")
        object.__setattr__(self, "path_weights", weights)
        object.__setattr__(self, "chains", tuple(self.chains))
        object.__setattr__(self, "bg_indices", tuple(int(i) for i in self.bg_indices))

    @property
    def k_paths(self) -> int:
        return len(self.path_weights)

    def to_dict(self) -> dict:
        return {
            "path_weights": list(self.path_weights),
            "chains": [c.to_dict() for c in self.chains],
            "bg_indices": list(self.bg_indices),
            "blend_weight": self.blend_weight,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MixPlan":
        return cls(
            path_weights=tuple(obj["path_weights"]),
            chains=tuple(OpChain.from_dict(c) for c in obj["chains"]),
            bg_indices=tuple(obj["bg_indices"]),
            blend_weight=obj["blend_weight"],
            rng_seed=obj.get("rng_seed"),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "MixPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _sample_op(kind: str, cfg: MixConfig, rng: np.random.Generator, height: int, width: int) -> AugOp:
    if kind == "rotate":
        return AugOp(kind, {"degrees": rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg)})
    if kind == "shear":
        return AugOp(kind, {"factor": rng.uniform(-cfg.shear_max, cfg.shear_max)})
    if kind == "translate":
        tx = math.ceil(width * cfg.translate_frac)
        ty = math.ceil(height * cfg.translate_frac)
        return AugOp(
            kind,
            {
                "dx": int(rng.integers(-tx, tx + 1)),
                "dy": int(rng.integers(-ty, ty + 1)),
            },
        )
    if kind == "posterize":
        bits = int(rng.integers(cfg.posterize_bits_min, cfg.posterize_bits_max + 1))
        return AugOp(kind, {"bits": bits})
    if kind == "solarize":
        return AugOp(kind, {"threshold": rng.uniform(cfg.solarize_min, cfg.solarize_max)})
    return AugOp(kind)


def sample_plan(
    cfg: MixConfig,
    rng: np.random.Generator,
    n_backgrounds: int,
    image_size: tuple[int, int],
    seed: int | None = None,
) -> MixPlan:
    """Draw a complete mixing plan.

    Draw order is fixed (weights, then per path: three ops, depth,
    background index, then the blend weight) so a given generator state
    always yields the same plan. Each path samples three ops and keeps
    a uniformly drawn prefix of length 1 to 3; the unused suffix is
    still drawn, mirroring the chain construction it models.
    """
    if n_backgrounds < 1:
        raise ValueError("need at least one background pair")
    height, width = image_size
    weights = rng.dirichlet(np.full(cfg.k_paths, cfg.dirichlet_alpha))
    chains = []
    bg_indices = []
    shared_bg: int | None = None
    for _ in range(cfg.k_paths):
        ops = tuple(
            _sample_op(cfg.op_set[int(rng.integers(len(cfg.op_set)))], cfg, rng, height, width)
            for _ in range(3)
        )
        depth = int(rng.integers(1, cfg.chain_depth_max + 1))
        chains.append(OpChain(ops[:depth]))
        if cfg.share_background:
            if shared_bg is None:
                shared_bg = int(rng.integers(n_backgrounds))
            bg_indices.append(shared_bg)
        else:
            bg_indices.append(int(rng.integers(n_backgrounds)))
    blend_weight = float(rng.beta(cfg.beta_a, cfg.beta_b))
    return MixPlan(
        path_weights=tuple(float(w) for w in weights),
        chains=tuple(chains),
        bg_indices=tuple(bg_indices),
        blend_weight=blend_weight,
        rng_seed=seed,
    )


def _apply_plan_arrays(
    plan: MixPlan,
    first: np.ndarray,
    second: np.ndarray,
    backgrounds: Sequence[tuple[np.ndarray, np.ndarray]],
    mask: np.ndarray,
    cotransform_mask: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of chain outputs blended back toward the original.

    Accepts leading batch dimensions on the mask (and tolerates them on
    the images), which the trainer uses to evaluate many perturbed
    masks in one pass.
    """
    mixed_first = 0.0
    mixed_second = 0.0
    for weight, chain, bg_idx in zip(plan.path_weights, plan.chains, plan.bg_indices):
        bg_first, bg_second = backgrounds[bg_idx]
        out_first, out_second = _chain_arrays(
            chain, first, second, bg_first, bg_second, mask, cotransform_mask=cotransform_mask
        )
        mixed_first = mixed_first + weight * out_first
        mixed_second = mixed_second + weight * out_second
    w0 = plan.blend_weight
    out_first = w0 * first + (1.0 - w0) * mixed_first
    out_second = w0 * second + (1.0 - w0) * mixed_second
    return out_first, out_second


def apply_plan(
    plan: MixPlan,
    pair: ImagePair,
    backgrounds: Sequence[BackgroundPair],
    mask: ChangeMask,
    cotransform_mask: bool = True,
) -> ImagePair:
    """Deterministically apply a previously sampled plan."""
    for i in plan.bg_indices:
        if not 0 <= i < len(backgrounds):
            raise ValueError(f"plan background index {i} outside set of {len(backgrounds)}")
        if backgrounds[i].shape != pair.shape:
            raise ValueError(
                f"background {i} shape {backgrounds[i].shape} does not match pair {pair.shape};"
                " conform backgrounds on ingest"
            )
    if pair.first.data.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match pair {pair.shape}")
    bg_arrays = [(b.first.data, b.second.data) for b in backgrounds]
    out_first, out_second = _apply_plan_arrays(
        plan,
        pair.first.data,
        pair.second.data,
        bg_arrays,
        mask.data,
        cotransform_mask=cotransform_mask,
    )
    return ImagePair(
        Image(np.clip(out_first, 0.0, 1.0)),
        Image(np.clip(out_second, 0.0, 1.0)),
    )


def bgmix(
    pair: ImagePair,
    backgrounds: Sequence[BackgroundPair],
    mask: ChangeMask,
    cfg: MixConfig,
    rng: np.random.Generator,
    seed: int | None = None,
) -> ImagePair:
    """Sample a plan and apply it in one call.

    The result stays within [0, 1] by construction: every chain output
    is clamped pixel data, path weights sum to one and the final blend
    is convex.
    """
    if not backgrounds:
        raise ValueError("background set is empty")
    plan = sample_plan(
        cfg, rng, len(backgrounds), (pair.first.height, pair.first.width), seed=seed
    )
    return apply_plan(plan, pair, backgrounds, mask, cotransform_mask=cfg.cotransform_mask)
