"""Run configuration: a flat key=value text format with dotted keys.

A run is described by one small text file. Keys are dotted paths into
the nested knobs (``mix.k_paths``, ``train.max_iters``, ``weights.lambda2``),
values are plain scalars or comma lists. Command-line flags produce the
same keys and are merged on top, so flags always win. The fully resolved
mapping is echoed into every output directory; feeding that echo back in
reproduces the run exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .engine import MixConfig
from .losses import LossWeights
from .ops import OP_KINDS
from .trainer import TrainConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_kv_text",
    "load_config",
    "merge_mappings",
]


class ConfigError(ValueError):
    """Malformed config text or an unknown/ill-typed key."""


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def merge_mappings(*layers: Mapping[str, str]) -> dict[str, str]:
    """Later layers override earlier ones (file first, then flags)."""
    merged: dict[str, str] = {}
    for layer in layers:
        merged.update(layer)
    return merged


def _coerce(key: str, value: str, kind: type):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def _ops_from(value: str) -> tuple[str, ...]:
    names = tuple(part.strip() for part in value.split(",") if part.strip())
    for name in names:
        if name not in OP_KINDS:
            raise ConfigError(f"unknown op kind {name!r}, expected one of {OP_KINDS}")
    return names


_MIX_FIELDS = {f.name: f.type for f in fields(MixConfig) if f.name != "op_set"}
_WEIGHT_FIELDS = {f.name for f in fields(LossWeights)}
_TRAIN_SCALARS = {
    f.name: f.type
    for f in fields(TrainConfig)
    if f.name not in ("weights", "mix", "seed")
}
_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(annotation) -> type:
    if isinstance(annotation, str):
        # dataclass stores the lazy annotation text; optional floats decay to float
        return _TYPE_NAMES.get(annotation.split(" ")[0], float)
    return annotation


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs besides its input images.

    ``weights.profile`` names the preset the lambdas start from; explicit
    ``weights.lambda*`` keys override individual terms afterwards, which
    is how the ablation sweeps are scripted.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    profile: str | None = None
    drop_ops: tuple[str, ...] = ()
    data_dir: Path | None = None
    out_dir: Path | None = None

    @property
    def seed(self) -> int:
        return self.train.seed

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "RunConfig":
        pending = dict(mapping)

        def take(key: str) -> str | None:
            return pending.pop(key, None)

        profile = take("weights.profile")
        weights = LossWeights.profile(profile) if profile else LossWeights()
        lambda_over = {}
        for name in _WEIGHT_FIELDS:
            raw = take(f"weights.{name}")
            if raw is not None:
                lambda_over[name] = _coerce(f"weights.{name}", raw, float)
        if lambda_over:
            weights = dataclasses.replace(weights, **lambda_over)

        mix_kw = {}
        for name, annotation in _MIX_FIELDS.items():
            raw = take(f"mix.{name}")
            if raw is not None:
                mix_kw[name] = _coerce(f"mix.{name}", raw, _field_type(annotation))
        drop_ops: tuple[str, ...] = ()
        raw = take("ops.drop")
        if raw is not None:
            drop_ops = _ops_from(raw)
        raw = take("ops.enable")
        if raw is not None:
            mix_kw["op_set"] = _ops_from(raw)
        if drop_ops:
            base = mix_kw.get("op_set", MixConfig().op_set)
            kept = tuple(kind for kind in base if kind not in drop_ops)
            if not kept:
                raise ConfigError("ops.drop removes every operation")
            mix_kw["op_set"] = kept
        mix = MixConfig(**mix_kw)

        train_kw: dict = {"weights": weights, "mix": mix}
        raw = take("seed")
        if raw is not None:
            train_kw["seed"] = _coerce("seed", raw, int)
        for name, annotation in _TRAIN_SCALARS.items():
            raw = take(f"train.{name}")
            if raw is not None:
                train_kw[name] = _coerce(f"train.{name}", raw, _field_type(annotation))

        paths = {}
        for key, attr in (("paths.data", "data_dir"), ("paths.out", "out_dir")):
            raw = take(key)
            if raw is not None:
                paths[attr] = Path(raw)

        if pending:
            unknown = ", ".join(sorted(pending))
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            train = TrainConfig(**train_kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(train=train, profile=profile, drop_ops=drop_ops, **paths)

    def to_mapping(self) -> dict[str, str]:
        """Fully resolved key set; the echo written next to run outputs."""
        out: dict[str, str] = {"seed": str(self.train.seed)}
        if self.profile:
            out["weights.profile"] = self.profile
        for name in sorted(_WEIGHT_FIELDS):
            out[f"weights.{name}"] = repr(getattr(self.train.weights, name))
        for name in _MIX_FIELDS:
            out[f"mix.{name}"] = repr(getattr(self.train.mix, name))
        out["ops.enable"] = ",".join(self.train.mix.op_set)
        if self.drop_ops:
            out["ops.drop"] = ",".join(self.drop_ops)
        for name in _TRAIN_SCALARS:
            value = getattr(self.train, name)
            if value is None:
                continue
            out[f"train.{name}"] = repr(value) if not isinstance(value, bool) else str(value).lower()
        if self.data_dir is not None:
            out["paths.data"] = str(self.data_dir)
        if self.out_dir is not None:
            out["paths.out"] = str(self.out_dir)
        return out

    def to_text(self) -> str:
        lines = [f"{key} = {value}" for key, value in self.to_mapping().items()]
        return "\n".join(lines) + "\n"


def load_config(path: Path | str) -> RunConfig:
    return RunConfig.from_mapping(parse_kv_text(Path(path).read_text()))
