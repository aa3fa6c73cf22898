"""Background-mixed augmentation and weakly supervised change detection.

The package turns scarce changed-pair data into diverse training
material: predicted change masks guide compositing of image pairs over
curated background pairs, a K-path mixing engine stacks augmentation
chains, and a set of consistency losses ties detector predictions on
originals, composites and mixtures together. A finite-difference
trainable toy detector, synthetic scene benchmark, metrics, and a CLI
round out the testbed.
"""

from .bench import (
    Benchmark,
    BenchmarkConfig,
    benchmark_train_config,
    build_benchmark,
    collapse_check,
    op_ablation,
    path_sweep,
    training_benefit,
)
from .compositing import SynthesizedPairs, rep, synthesize
from .config import ConfigError, RunConfig, load_config
from .detector import ToyDetector
from .engine import MixConfig, MixPlan, apply_plan, bgmix, sample_plan
from .features import (
    DefaultFeatureExtractor,
    FeatureExtractor,
    FileFeatureExtractor,
    descriptor_dimension,
    pair_digest,
)
from .imaging import (
    BackgroundPair,
    ChangeMask,
    Image,
    ImageIOError,
    ImagePair,
    blend,
    hadamard,
    load_image,
    save_image,
)
from .losses import (
    Discriminator,
    LossReport,
    LossWeights,
    lcon,
    lcon1,
    lcon2,
    lcon3,
    lcon4,
    lcon5,
    ssim,
    total_loss,
)
from .metrics import MetricsReport, evaluate
from .ops import (
    OP_KINDS,
    AugOp,
    OpChain,
    apply_bg_aware,
    apply_chain,
    apply_geometric,
    apply_photometric,
)
from .trainer import TrainConfig, TrainLog, train, train_step

__version__ = "0.1.0"

__all__ = [
    "AugOp",
    "BackgroundPair",
    "Benchmark",
    "BenchmarkConfig",
    "ChangeMask",
    "ConfigError",
    "DefaultFeatureExtractor",
    "Discriminator",
    "FeatureExtractor",
    "FileFeatureExtractor",
    "Image",
    "ImageIOError",
    "ImagePair",
    "LossReport",
    "LossWeights",
    "MetricsReport",
    "MixConfig",
    "MixPlan",
    "OpChain",
    "OP_KINDS",
    "RunConfig",
    "SynthesizedPairs",
    "ToyDetector",
    "TrainConfig",
    "TrainLog",
    "apply_bg_aware",
    "apply_chain",
    "apply_geometric",
    "apply_photometric",
    "apply_plan",
    "benchmark_train_config",
    "bgmix",
    "blend",
    "build_benchmark",
    "collapse_check",
    "descriptor_dimension",
    "evaluate",
    "hadamard",
    "lcon",
    "lcon1",
    "lcon2",
    "lcon3",
    "lcon4",
    "lcon5",
    "load_config",
    "load_image",
    "op_ablation",
    "pair_digest",
    "path_sweep",
    "rep",
    "sample_plan",
    "save_image",
    "ssim",
    "synthesize",
    "total_loss",
    "train",
    "train_step",
    "training_benefit",
]
