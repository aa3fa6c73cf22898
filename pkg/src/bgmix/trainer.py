"""Finite-difference training of the toy detector.

Each iteration follows the weakly supervised loop: predict a mask,
build a mixed augmentation of the pair, synthesize composite pairs for
both branches against a drawn background pair, score the consistency
losses, and update the detector by SGD with momentum. Gradients come
from central finite differences over the detector parameters; the
whole perturbation sweep is evaluated as one batched pass, with every
array op broadcasting over a leading axis of parameter variants.

The adversarial term alternates in the usual way: discriminators take
one ascent step per iteration on the full log-likelihood, and the
detector descends the same literal formula. When a discriminator
confidently rejects a composite its gradient toward the detector dies
out, so degraded masks are rescued by the feature-consistency term or
not at all; ablations rely on exactly that.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._accel import njit
from .detector import ToyDetector, _forward_batch
from .engine import MixConfig, MixPlan, _apply_plan_arrays, sample_plan
from .features import DefaultFeatureExtractor, describe_pair_arrays, descriptor_dimension
from .imaging import BackgroundPair, ChangeMask, ImagePair
from .losses import (
    BranchTerms,
    Discriminator,
    LossReport,
    LossWeights,
    _ssim_l1_arrays,
    cosine_distance,
)
from .metrics import MetricsReport, evaluate

__all__ = [
    "TrainConfig",
    "StepSample",
    "IterRecord",
    "EvalRecord",
    "TrainLog",
    "NonFiniteLossError",
    "draw_step_sample",
    "objective_at",
    "train_step",
    "train",
]


class NonFiniteLossError(RuntimeError):
    """Raised when an objective evaluation produces NaN or infinity."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs; batch size, learning rate and momentum keep
    their published defaults, iteration count is sized for the toy."""

    batch_size: int = 4
    learning_rate: float = 1e-4
    momentum: float = 0.5
    max_iters: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)
    mix: MixConfig = field(default_factory=MixConfig)
    seed: int = 0
    fd_step: float = 1e-4
    eval_every: int = 200
    augment: bool = True
    disc_learning_rate: float | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_iters < 1:
            raise ValueError("batch_size and max_iters must be positive")
        if self.learning_rate <= 0 or self.fd_step <= 0:
            raise ValueError("learning_rate and fd_step must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @property
    def effective_disc_lr(self) -> float:
        return self.disc_learning_rate if self.disc_learning_rate is not None else self.learning_rate


@dataclass(frozen=True)
class StepSample:
    """Frozen randomness for one item: the mixing plan (None when
    augmentation is disabled) and the background pair drawn for the
    loss terms."""

    plan: MixPlan | None
    bg_index: int


@dataclass
class IterRecord:
    iteration: int
    report: LossReport
    area_rate: float

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "area_rate": self.area_rate,
            **self.report.to_dict(),
        }


@dataclass
class EvalRecord:
    iteration: int
    metrics: MetricsReport

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, **self.metrics.to_dict()}


@dataclass
class TrainLog:
    """Per-iteration loss breakdown plus periodic held-out metrics."""

    records: list[IterRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps({"kind": "iter", **rec.to_dict()}) + "\n")
            for ev in self.evals:
                fh.write(json.dumps({"kind": "eval", **ev.to_dict()}) + "\n")


def draw_step_sample(
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_backgrounds: int,
    image_size: tuple[int, int],
) -> StepSample:
    """Draw one item's randomness in a fixed order."""
    plan = None
    if cfg.augment:
        plan = sample_plan(cfg.mix, rng, n_backgrounds, image_size)
    bg_index = int(rng.integers(n_backgrounds))
    return StepSample(plan=plan, bg_index=bg_index)


# ---------------------------------------------------------------------------
# batched objective

if njit is not None:

    @njit(cache=True, fastmath={"reassoc", "contract", "nsz"})
    def _composite_kernel(  # pragma: no cover - jitted
        fa, fb, bga, bgb, mask, changed_a, changed_b, bgprime_a, bgprime_b
    ):
        nb, h, w = mask.shape
        nf = fa.shape[0]
        c = fa.shape[3]
        for n in range(nb):
            i = n if nf == nb else 0
            for y in range(h):
                for x in range(w):
                    m = mask[n, y, x]
                    for ch in range(c):
                        va = fa[i, y, x, ch]
                        ca = va * m + bga[y, x, ch] * (1.0 - m)
                        changed_a[n, y, x, ch] = ca
                        bgprime_a[n, y, x, ch] = (va + bga[y, x, ch]) - ca
                        vb = fb[i, y, x, ch]
                        cb = vb * m + bgb[y, x, ch] * (1.0 - m)
                        changed_b[n, y, x, ch] = cb
                        bgprime_b[n, y, x, ch] = (vb + bgb[y, x, ch]) - cb


def _composites(
    fa: np.ndarray,
    fb: np.ndarray,
    bga: np.ndarray,
    bgb: np.ndarray,
    mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Both composites of both timestamps in one pass.

    Because a composite and its complement sum to image + background
    pixelwise, the complement is derived by subtraction.
    """
    if njit is not None and mask.ndim == 3 and fa.ndim in (3, 4) and bga.ndim == 3:
        j = mask.shape[0]
        shape = (j,) + bga.shape
        fa4 = np.ascontiguousarray(fa, dtype=np.float64).reshape((-1,) + bga.shape)
        fb4 = np.ascontiguousarray(fb, dtype=np.float64).reshape((-1,) + bga.shape)
        outs = tuple(np.empty(shape) for _ in range(4))
        _composite_kernel(fa4, fb4, bga, bgb, np.ascontiguousarray(mask), *outs)
        return outs
    m = mask[..., None]
    changed_a = fa * m + bga * (1.0 - m)
    changed_b = fb * m + bgb * (1.0 - m)
    bgprime_a = (fa + bga) - changed_a
    bgprime_b = (fb + bgb) - changed_b
    return changed_a, changed_b, bgprime_a, bgprime_b


def _branch_arrays(
    fa: np.ndarray,
    fb: np.ndarray,
    feats_pair: np.ndarray,
    bga: np.ndarray,
    bgb: np.ndarray,
    feats_bg: np.ndarray,
    mask: np.ndarray,
    mask_bg: np.ndarray,
    weights: LossWeights,
    d_changed: Discriminator,
    d_background: Discriminator,
) -> dict[str, np.ndarray]:
    """Terms 2..5 for one branch over a leading variant axis."""
    changed_a, changed_b, bgprime_a, bgprime_b = _composites(fa, fb, bga, bgb, mask)

    feats_changed = describe_pair_arrays(changed_a, changed_b)
    feats_bgprime = describe_pair_arrays(bgprime_a, bgprime_b)

    t2 = cosine_distance(feats_pair, feats_changed) + cosine_distance(feats_bg, feats_bgprime)
    ssim_a, l1_a = _ssim_l1_arrays(fa, changed_a)
    ssim_b, l1_b = _ssim_l1_arrays(fb, changed_b)
    t3 = (1.0 - ssim_a - l1_a) + (1.0 - ssim_b - l1_b)
    s_real = d_changed.score_features(feats_pair)
    s_changed = d_changed.score_features(feats_changed)
    s_bg = d_background.score_features(feats_bg)
    s_bgprime = d_background.score_features(feats_bgprime)
    t4 = np.log(s_real) + np.log(1.0 - s_changed) + np.log(s_bg) + np.log(1.0 - s_bgprime)
    t5 = (mask_bg**2).mean(axis=(-2, -1))
    combined = (
        weights.lambda2 * t2 + weights.lambda3 * t3 + weights.lambda4 * t4 + weights.lambda5 * t5
    )
    return {
        "t2": t2,
        "t3": t3,
        "t4": t4,
        "t5": t5,
        "combined": combined,
        "feats_pair": feats_pair,
        "feats_changed": feats_changed,
        "feats_bg": feats_bg,
        "feats_bgprime": feats_bgprime,
    }


def _evaluate_variants(
    theta: np.ndarray,
    first: np.ndarray,
    second: np.ndarray,
    sample: StepSample,
    bg_arrays: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    d_changed: Discriminator,
    d_background: Discriminator,
    work_mask: np.ndarray | None = None,
) -> dict:
    """Evaluate the full objective for every parameter variant at once.

    theta is (J, n). Returns per-variant objective values plus the
    pieces needed to assemble the j=0 report and discriminator update.

    Augmentation is data preparation: the plan is applied once, using
    work_mask (default: the row-0 prediction), and the same augmented
    pair feeds every variant. Parameters influence the augmented
    branch through its predicted masks and composites, not through
    the construction of the augmented images themselves.
    """
    j = theta.shape[0]
    weights = cfg.weights
    bga, bgb = bg_arrays[sample.bg_index]

    mask = _forward_batch(theta, first, second)  # (J, H, W)
    mask_bg = _forward_batch(theta, bga, bgb)

    feats_pair = describe_pair_arrays(first, second)
    feats_bg = describe_pair_arrays(bga, bgb)

    real = _branch_arrays(
        first, second, feats_pair, bga, bgb, feats_bg, mask, mask_bg,
        weights, d_changed, d_background,
    )
    if sample.plan is not None:
        aug_a, aug_b = _apply_plan_arrays(
            sample.plan,
            first,
            second,
            bg_arrays,
            mask[0] if work_mask is None else work_mask,
            cotransform_mask=cfg.mix.cotransform_mask,
        )
        aug_a = np.clip(aug_a, 0.0, 1.0)
        aug_b = np.clip(aug_b, 0.0, 1.0)
        mask_aug = _forward_batch(theta, aug_a, aug_b)
        feats_aug = describe_pair_arrays(aug_a, aug_b)
        aug = _branch_arrays(
            aug_a, aug_b, feats_aug, bga, bgb, feats_bg, mask_aug, mask_bg,
            weights, d_changed, d_background,
        )
    else:
        # No augmented pair exists; the objective is the real branch alone,
        # and the augmented slots of the report stay at zero.
        feats_aug = feats_pair
        zero = np.zeros(np.shape(real["combined"]))
        aug = {key: zero for key in ("t2", "t3", "t4", "t5", "combined")}

    t1 = cosine_distance(feats_pair, feats_aug) if sample.plan is not None else 0.0

    objective = np.broadcast_to(
        weights.lambda1 * t1 + real["combined"] + aug["combined"], (j,)
    ).copy()
    return {
        "objective": objective,
        "t1": np.broadcast_to(t1, (j,)),
        "real": real,
        "aug": aug,
        "mask": mask,
    }


def _report_from_parts(parts: dict, weights: LossWeights) -> LossReport:
    """Assemble the j=0 LossReport with formula-valued terms."""

    def branch(side: dict) -> BranchTerms:
        t2 = float(np.broadcast_to(side["t2"], parts["objective"].shape)[0])
        t3 = float(np.broadcast_to(side["t3"], parts["objective"].shape)[0])
        t4 = float(np.broadcast_to(side["t4"], parts["objective"].shape)[0])
        t5 = float(np.broadcast_to(side["t5"], parts["objective"].shape)[0])
        combined = (
            weights.lambda2 * t2 + weights.lambda3 * t3 + weights.lambda4 * t4 + weights.lambda5 * t5
        )
        return BranchTerms(t2, t3, t4, t5, combined)

    real = branch(parts["real"])
    aug = branch(parts["aug"])
    t1 = float(parts["t1"][0])
    total = weights.lambda1 * t1 + real.combined + aug.combined
    return LossReport(lcon1=t1, real=real, aug=aug, total=total)


def _fd_matrix(theta0: np.ndarray, fd_step: float) -> tuple[np.ndarray, np.ndarray]:
    """Variant matrix [base, +h0, -h0, +h1, -h1, ...] and the steps.

    Steps are relative to parameter magnitude with a floor of 1, so
    zero-valued parameters still move.
    """
    n = theta0.size
    h = fd_step * np.maximum(np.abs(theta0), 1.0)
    mat = np.tile(theta0, (2 * n + 1, 1))
    idx = np.arange(n)
    mat[1 + 2 * idx, idx] += h
    mat[2 + 2 * idx, idx] -= h
    return mat, h


def objective_at(
    theta: np.ndarray,
    pair: ImagePair,
    sample: StepSample,
    backgrounds: Sequence[BackgroundPair],
    cfg: TrainConfig,
    d_changed: Discriminator,
    d_background: Discriminator,
    work_mask: np.ndarray | None = None,
) -> float:
    """Objective for a single parameter vector under frozen randomness.

    This is the function train_step differentiates; tests recompute
    central differences through it to audit the gradient sweep. Because
    train_step holds the augmented inputs fixed at the unperturbed
    prediction while sweeping variants, an audit of its gradients must
    pass that prediction as work_mask; left as None, the augmentation
    is rebuilt from theta's own mask.
    """
    bg_arrays = [(b.first.data, b.second.data) for b in backgrounds]
    parts = _evaluate_variants(
        np.asarray(theta, dtype=np.float64)[None, :],
        pair.first.data,
        pair.second.data,
        sample,
        bg_arrays,
        cfg,
        d_changed,
        d_background,
        work_mask=work_mask,
    )
    return float(parts["objective"][0])


def _dump_nonfinite(
    theta: np.ndarray, objective: np.ndarray, pair: ImagePair, sample: StepSample
) -> str:
    path = Path(tempfile.gettempdir()) / f"bgmix-nonfinite-{os.getpid()}-{time.time_ns()}.npz"
    np.savez(
        path,
        theta=theta,
        objective=objective,
        first=pair.first.data,
        second=pair.second.data,
        plan_json=np.array(json.dumps(sample.plan.to_dict()) if sample.plan else ""),
        bg_index=np.array(sample.bg_index),
    )
    return str(path)


def train_step(
    detector: ToyDetector,
    d_changed: Discriminator,
    d_background: Discriminator,
    batch: Sequence[ImagePair],
    backgrounds: Sequence[BackgroundPair],
    cfg: TrainConfig,
    rng: np.random.Generator,
    velocity: np.ndarray | None = None,
) -> tuple[LossReport, float, np.ndarray]:
    """One SGD-with-momentum step over a batch.

    The detector and both discriminators update in place. Returns the
    batch-mean loss report, the batch-mean predicted area rate, and the
    updated momentum state.
    """
    if not batch:
        raise ValueError("empty batch")
    if not backgrounds:
        raise ValueError("background set is empty")
    theta0 = detector.to_vector()
    mat, h = _fd_matrix(theta0, cfg.fd_step)
    bg_arrays = [(b.first.data, b.second.data) for b in backgrounds]

    grads = np.zeros_like(theta0)
    reports: list[LossReport] = []
    area = 0.0
    d1_real: list[np.ndarray] = []
    d1_synth: list[np.ndarray] = []
    d2_real: list[np.ndarray] = []
    d2_synth: list[np.ndarray] = []

    for pair in batch:
        size = (pair.first.height, pair.first.width)
        sample = draw_step_sample(cfg, rng, len(backgrounds), size)
        parts = _evaluate_variants(
            mat, pair.first.data, pair.second.data, sample, bg_arrays, cfg,
            d_changed, d_background,
        )
        objective = parts["objective"]
        if not np.all(np.isfinite(objective)):
            dump = _dump_nonfinite(mat, objective, pair, sample)
            raise NonFiniteLossError(
                f"non-finite objective in training step; diagnostics at {dump}"
            )
        grads += (objective[1::2] - objective[2::2]) / (2.0 * h)
        reports.append(_report_from_parts(parts, cfg.weights))
        area += float((parts["mask"][0] >= 0.5).mean())

        def _row0(feats: np.ndarray) -> np.ndarray:
            feats = np.asarray(feats)
            return feats[0] if feats.ndim == 2 else feats

        sides = [parts["real"]] if sample.plan is None else [parts["real"], parts["aug"]]
        for side in sides:
            d1_real.append(_row0(side["feats_pair"]))
            d1_synth.append(_row0(side["feats_changed"]))
            d2_real.append(_row0(side["feats_bg"]))
            d2_synth.append(_row0(side["feats_bgprime"]))

    grads /= len(batch)
    area /= len(batch)

    if velocity is None:
        velocity = np.zeros_like(theta0)
    velocity = cfg.momentum * velocity + cfg.learning_rate * grads
    detector.set_vector(theta0 - velocity)

    disc_lr = cfg.effective_disc_lr
    d_changed.ascent_step(np.stack(d1_real), np.stack(d1_synth), disc_lr)
    d_background.ascent_step(np.stack(d2_real), np.stack(d2_synth), disc_lr)

    mean = lambda values: float(np.mean(values))  # noqa: E731
    report = LossReport(
        lcon1=mean([r.lcon1 for r in reports]),
        real=BranchTerms(
            mean([r.real.lcon2 for r in reports]),
            mean([r.real.lcon3 for r in reports]),
            mean([r.real.lcon4 for r in reports]),
            mean([r.real.lcon5 for r in reports]),
            mean([r.real.combined for r in reports]),
        ),
        aug=BranchTerms(
            mean([r.aug.lcon2 for r in reports]),
            mean([r.aug.lcon3 for r in reports]),
            mean([r.aug.lcon4 for r in reports]),
            mean([r.aug.lcon5 for r in reports]),
            mean([r.aug.combined for r in reports]),
        ),
        total=mean([r.total for r in reports]),
    )
    return report, area, velocity


def _mean_metrics(
    detector: ToyDetector, eval_set: Sequence[tuple[ImagePair, ChangeMask]]
) -> MetricsReport:
    """Average held-out metrics of per-scene evaluations."""
    per_scene = [evaluate(detector.predict(pair), gt) for pair, gt in eval_set]
    return MetricsReport(
        f1=float(np.mean([m.f1 for m in per_scene])),
        iou=float(np.mean([m.iou for m in per_scene])),
        overall_accuracy=float(np.mean([m.overall_accuracy for m in per_scene])),
        true_positives=sum(m.true_positives for m in per_scene),
        false_positives=sum(m.false_positives for m in per_scene),
        false_negatives=sum(m.false_negatives for m in per_scene),
        true_negatives=sum(m.true_negatives for m in per_scene),
    )


def train(
    pairs: Sequence[ImagePair],
    backgrounds: Sequence[BackgroundPair],
    cfg: TrainConfig,
    eval_set: Sequence[tuple[ImagePair, ChangeMask]] | None = None,
) -> tuple[ToyDetector, TrainLog]:
    """Run the full loop from the documented initialization.

    Reproducible under a fixed config seed: item sampling, plan draws
    and all updates flow from one sequential generator.
    """
    if not pairs:
        raise ValueError("training set is empty")
    channels = pairs[0].first.channels
    detector = ToyDetector.default(channels)
    dim = descriptor_dimension(channels)
    extractor = DefaultFeatureExtractor()
    d_changed = Discriminator(dim, extractor)
    d_background = Discriminator(dim, extractor)
    rng = np.random.default_rng(cfg.seed)
    velocity: np.ndarray | None = None
    log = TrainLog()

    for iteration in range(cfg.max_iters):
        batch = [pairs[int(rng.integers(len(pairs)))] for _ in range(cfg.batch_size)]
        report, area, velocity = train_step(
            detector, d_changed, d_background, batch, backgrounds, cfg, rng, velocity
        )
        log.records.append(IterRecord(iteration, report, area))
        if eval_set and (iteration + 1) % cfg.eval_every == 0:
            log.evals.append(EvalRecord(iteration, _mean_metrics(detector, eval_set)))

    if eval_set and (not log.evals or log.evals[-1].iteration != cfg.max_iters - 1):
        log.evals.append(EvalRecord(cfg.max_iters - 1, _mean_metrics(detector, eval_set)))
    return detector, log
