"""Command-line entry point.

Subcommands: ``prepare`` (tile, paste, enrich a dataset directory),
``augment`` (write mixed pairs plus plan sidecars), ``train-toy``
(train the toy detector on the synthetic benchmark or a directory),
``eval`` (score predictions against ground truth), ``losses`` (emit a
loss report for one scene) and ``preview`` (contact sheet of variants).

Reproducibility contract: every random draw descends from ``--seed``
(default from ``BGMIX_SEED``), items are seeded individually from the
run seed and their position, so output trees are byte-identical across
reruns and worker counts. Each artifact directory receives the fully
resolved configuration as ``config.txt``; exit status is 0 on success,
1 on usage errors and 2 on data errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, merge_mappings, parse_kv_text
from .dataset import (
    DatasetItem,
    Tile,
    enrich,
    load_backgrounds,
    load_dataset,
    paste_changes,
    save_dataset,
    tile,
)
from .detector import ToyDetector
from .engine import apply_plan, sample_plan
from .features import DefaultFeatureExtractor, descriptor_dimension
from .imaging import (
    BackgroundPair,
    ChangeMask,
    Image,
    ImageIOError,
    ImagePair,
    load_image,
    save_image,
)
from .losses import Discriminator, total_loss
from .metrics import evaluate
from .trainer import train

__all__ = ["main", "run", "sheet_dimensions"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; argparse's default of 2 is reserved for data
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _default_seed() -> int:
    return int(os.environ.get("BGMIX_SEED", "0"))


def _item_rng(run_seed: int, index: int) -> np.random.Generator:
    # position-keyed streams keep outputs independent of worker count
    return np.random.default_rng(np.random.SeedSequence([run_seed, index]))


def _resolved_config(
    args: argparse.Namespace,
    flag_map: dict[str, str],
    defaults: RunConfig | None = None,
) -> RunConfig:
    """Layered resolution: defaults, then the config file, then flags."""
    file_map: dict[str, str] = {}
    if getattr(args, "config", None):
        file_map = parse_kv_text(Path(args.config).read_text())
    user = merge_mappings(file_map, flag_map)
    base = defaults.to_mapping() if defaults else {}
    if "weights.profile" in user:
        # a profile choice resets every lambda; keep baked-in values out
        for key in [k for k in base if k.startswith("weights.lambda")]:
            del base[key]
    return RunConfig.from_mapping(merge_mappings(base, user))


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())


def _mask_for(item: DatasetItem, detector: ToyDetector) -> ChangeMask:
    """Provided annotation when present, otherwise the detector's guess."""
    return item.mask if item.mask is not None else detector.predict(item.pair)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_prepare(args: argparse.Namespace) -> int:
    if args.paste and not args.backgrounds:
        raise _UsageError("--paste requires --backgrounds")
    items = load_dataset(args.data)
    out: list[DatasetItem] = []
    for item in items:
        tiles = (
            tile(item.pair, item.mask, args.tile_size)
            if args.tile_size
            else [Tile(item.pair, item.mask, 0, 0)]
        )
        for t in tiles:
            out.append(
                DatasetItem(f"{item.item_id}_y{t.y}x{t.x}", t.pair, t.mask, item.label)
            )
    if args.paste:
        backgrounds = load_backgrounds(args.backgrounds)
        changed = [item for item in out if item.label == 1 and item.mask is not None]
        pasted: list[DatasetItem] = []
        for i, item in enumerate(changed):
            rng = _item_rng(args.seed, 1_000_000 + i)
            for copy in range(args.paste):
                bg = backgrounds[int(rng.integers(len(backgrounds)))]
                pair, mask = paste_changes(item.pair, item.mask, bg, rng)
                pasted.append(DatasetItem(f"{item.item_id}_p{copy}", pair, mask, 1))
        out.extend(pasted)
    if args.enrich:
        enriched: list[DatasetItem] = []
        for i, item in enumerate(out):
            rng = _item_rng(args.seed, 2_000_000 + i)
            for j, (pair, mask, label) in enumerate(
                enrich(item.pair, item.mask, item.label, rng, count=args.enrich)
            ):
                enriched.append(DatasetItem(f"{item.item_id}_e{j}", pair, mask, label))
        out.extend(enriched)
    save_dataset(out, args.out)
    print(f"wrote {len(out)} items to {args.out}")
    return 0


def _parse_k_paths(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def _augment_tree(
    cfg: RunConfig,
    items: list[DatasetItem],
    backgrounds: list[BackgroundPair],
    out_dir: Path,
    workers: int,
) -> None:
    detector = ToyDetector.default(items[0].pair.first.channels)
    (out_dir / "pairs").mkdir(parents=True, exist_ok=True)
    (out_dir / "plans").mkdir(exist_ok=True)
    _echo_config(cfg, out_dir)

    def one(indexed: tuple[int, DatasetItem]) -> None:
        index, item = indexed
        rng = _item_rng(cfg.seed, index)
        mask = _mask_for(item, detector)
        plan = sample_plan(cfg.train.mix, rng, len(backgrounds), item.pair.shape[:2])
        mixed = apply_plan(
            plan, item.pair, backgrounds, mask, cfg.train.mix.cotransform_mask
        )
        save_image(mixed.first, out_dir / "pairs" / f"{item.item_id}_t1.png")
        save_image(mixed.second, out_dir / "pairs" / f"{item.item_id}_t2.png")
        plan.to_json(out_dir / "plans" / f"{item.item_id}.json")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, enumerate(items)))
    else:
        for indexed in enumerate(items):
            one(indexed)


def _cmd_augment(args: argparse.Namespace) -> int:
    flag_map: dict[str, str] = {"seed": str(args.seed)}
    if args.drop_op:
        flag_map["ops.drop"] = ",".join(args.drop_op)
    cfg = _resolved_config(args, flag_map)
    items = load_dataset(args.data)
    if not items:
        raise ValueError(f"no items in {args.data}")
    backgrounds = load_backgrounds(args.backgrounds)
    if not backgrounds:
        raise ValueError(f"no background pairs in {args.backgrounds}")
    ks = _parse_k_paths(args.k_paths) if args.k_paths else [cfg.train.mix.k_paths]
    out_root = Path(args.out)
    for k in ks:
        mix = dataclasses.replace(cfg.train.mix, k_paths=k)
        k_cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mix=mix))
        tree = out_root / f"k{k}" if len(ks) > 1 else out_root
        _augment_tree(k_cfg, items, backgrounds, tree, args.workers)
    print(f"augmented {len(items)} pairs x {len(ks)} path counts under {out_root}")
    return 0


def _cmd_train_toy(args: argparse.Namespace) -> int:
    flag_map: dict[str, str] = {"seed": str(args.seed)}
    if args.iters is not None:
        flag_map["train.max_iters"] = str(args.iters)
    if args.profile:
        flag_map["weights.profile"] = args.profile
    for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
        value = getattr(args, name)
        if value is not None:
            flag_map[f"weights.{name}"] = str(value)
    if args.k_paths is not None:
        flag_map["mix.k_paths"] = str(args.k_paths)
    if args.drop_op:
        flag_map["ops.drop"] = ",".join(args.drop_op)
    if args.no_augment:
        flag_map["train.augment"] = "false"
    if args.no_mask_cotransform:
        flag_map["mix.cotransform_mask"] = "false"
    if args.batch_size is not None:
        flag_map["train.batch_size"] = str(args.batch_size)

    if args.data:
        if not args.backgrounds:
            raise _UsageError("--data requires --backgrounds")
        cfg = _resolved_config(args, flag_map)
        items = load_dataset(args.data)
        pairs = [item.pair for item in items if item.label == 1]
        backgrounds = load_backgrounds(args.backgrounds)
        eval_set = [
            (item.pair, item.mask) for item in items if item.mask is not None
        ] or None
    else:
        from .bench import BenchmarkConfig, benchmark_train_config, build_benchmark

        defaults = RunConfig(train=benchmark_train_config(args.seed))
        cfg = _resolved_config(args, flag_map, defaults=defaults)
        bench = build_benchmark(BenchmarkConfig(), cfg.seed)
        pairs = list(bench.train_pairs)
        backgrounds = list(bench.backgrounds)
        eval_set = bench.eval_set

    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    detector, log = train(pairs, backgrounds, cfg.train, eval_set=eval_set)
    log.to_jsonl(out_dir / "log.jsonl")
    detector.save_text(out_dir / "checkpoint.txt")
    summary = {
        "final_iou": log.evals[-1].metrics.iou if log.evals else None,
        "mean_area_rate_last_100": float(
            np.mean([r.area_rate for r in log.records[-100:]])
        ),
        "iterations": len(log.records),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    items = load_dataset(args.data)
    scored = [item for item in items if item.mask is not None]
    if not scored:
        raise ValueError(f"no ground-truth masks in {args.data}")
    if args.checkpoint:
        detector = ToyDetector.load_text(args.checkpoint)
        preds = {item.item_id: detector.predict(item.pair) for item in scored}
    else:
        pred_root = Path(args.pred)
        preds = {}
        for item in scored:
            path = pred_root / f"{item.item_id}.png"
            if not path.exists():
                raise FileNotFoundError(f"missing prediction {path}")
            preds[item.item_id] = ChangeMask(load_image(path).data[:, :, 0])
    reports = [evaluate(preds[item.item_id], item.mask) for item in scored]
    mean = {
        key: float(np.mean([getattr(r, key) for r in reports]))
        for key in ("f1", "overall_accuracy", "iou")
    }
    payload = {"items": len(reports), **mean}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload))
    return 0


def _cmd_losses(args: argparse.Namespace) -> int:
    pair = ImagePair(load_image(args.first), load_image(args.second))
    background = BackgroundPair(load_image(args.bg_first), load_image(args.bg_second))
    cfg = _resolved_config(args, {"seed": str(args.seed)})
    detector = ToyDetector.default(pair.first.channels)
    rng = np.random.default_rng(cfg.seed)
    mask = (
        ChangeMask(load_image(args.mask).data[:, :, 0])
        if args.mask
        else detector.predict(pair)
    )
    plan = sample_plan(cfg.train.mix, rng, 1, pair.shape[:2])
    mixed = apply_plan(plan, pair, [background], mask, cfg.train.mix.cotransform_mask)
    extractor = DefaultFeatureExtractor()
    dim = descriptor_dimension(pair.first.channels)
    report = total_loss(
        pair,
        mixed,
        background,
        detector,
        extractor,
        Discriminator(dim, extractor),
        Discriminator(dim, extractor),
        cfg.train.weights,
    )
    print(json.dumps(report.to_dict(), indent=2))
    return 0


_SHEET_GAP = 2  # pixels between contact-sheet cells


def sheet_dimensions(height: int, width: int, n: int) -> tuple[int, int]:
    """Contact sheet is 2 rows (the two timestamps) by n+1 columns."""
    cols = n + 1
    return (
        2 * height + _SHEET_GAP,
        cols * width + _SHEET_GAP * (cols - 1),
    )


def _cmd_preview(args: argparse.Namespace) -> int:
    if args.n < 0:
        raise _UsageError("-n must be nonnegative")
    pair = ImagePair(load_image(args.first), load_image(args.second))
    backgrounds = load_backgrounds(args.backgrounds)
    if not backgrounds:
        raise ValueError(f"no background pairs in {args.backgrounds}")
    cfg = _resolved_config(args, {"seed": str(args.seed)})
    detector = ToyDetector.default(pair.first.channels)
    mask = (
        ChangeMask(load_image(args.mask).data[:, :, 0])
        if args.mask
        else detector.predict(pair)
    )
    rng = np.random.default_rng(cfg.seed)
    variants = [pair]
    for _ in range(args.n):
        plan = sample_plan(cfg.train.mix, rng, len(backgrounds), pair.shape[:2])
        variants.append(
            apply_plan(plan, pair, backgrounds, mask, cfg.train.mix.cotransform_mask)
        )
    h, w = pair.shape[:2]
    sheet_h, sheet_w = sheet_dimensions(h, w, args.n)
    sheet = np.ones((sheet_h, sheet_w, pair.first.channels))
    for col, variant in enumerate(variants):
        x = col * (w + _SHEET_GAP)
        sheet[0:h, x : x + w] = variant.first.data
        sheet[h + _SHEET_GAP :, x : x + w] = variant.second.data
    save_image(Image(sheet), args.out)
    print(f"wrote {sheet_w}x{sheet_h} sheet with {args.n} variants to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="bgmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--seed", type=int, default=_default_seed(), help="run seed (env BGMIX_SEED)"
        )

    p = sub.add_parser("prepare", help="tile, paste and enrich a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, default=0, help="0 keeps full frames")
    p.add_argument("--paste", type=int, default=0, help="pasted copies per changed item")
    p.add_argument("--backgrounds", help="background dataset for --paste")
    p.add_argument("--enrich", type=int, default=0, help="enriched copies per item")
    add_seed(p)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("augment", help="write mixed pairs with plan sidecars")
    p.add_argument("--data", required=True)
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    add_seed(p)
    p.add_argument("--k-paths", help="single count or a sweep like 2..6")
    p.add_argument("--drop-op", action="append", default=[])
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train-toy", help="train the toy detector")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory; omitted = synthetic benchmark")
    p.add_argument("--backgrounds", help="background directory when --data is given")
    p.add_argument("--config")
    add_seed(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--profile", choices=("aicd", "bcd"))
    for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--k-paths", type=int)
    p.add_argument("--drop-op", action="append", default=[])
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-mask-cotransform", action="store_true")
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pred", help="directory of predicted mask PNGs")
    group.add_argument("--checkpoint", help="detector checkpoint to run")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("losses", help="loss report for one scene as JSON")
    p.add_argument("--first", required=True)
    p.add_argument("--second", required=True)
    p.add_argument("--bg-first", required=True)
    p.add_argument("--bg-second", required=True)
    p.add_argument("--mask")
    p.add_argument("--config")
    add_seed(p)
    p.set_defaults(func=_cmd_losses)

    p = sub.add_parser("preview", help="contact sheet of augmented variants")
    p.add_argument("--first", required=True)
    p.add_argument("--second", required=True)
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("-n", type=int, default=3)
    add_seed(p)
    p.set_defaults(func=_cmd_preview)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"bgmix: {exc}", file=sys.stderr)
        return 1
    except (
        ConfigError,
        FileNotFoundError,
        ImageIOError,
        NotADirectoryError,
        ValueError,
    ) as exc:
        print(f"bgmix: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
