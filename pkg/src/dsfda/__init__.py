"""Source-free adaptation of expression classifiers from neutral target frames."""

from .data import (
    AUDIT, NEUTRAL, ConfigError, DataError, DomainSplit, LabelingError, SynthConfig, load_directory, load_manifest,
    preprocess, sample_pairs, synth_generate,
)
from .evaluation import MetricsReport, evaluate, fid, psnr, ssim
from .losses import LossWeights, NumericError
from .networks import DSFDAModel, ModelConfig, load_checkpoint, save_checkpoint
from .prototypes import ClusterParams, PrototypeSet, select_prototypes
from .training import AdaptationMode, TrainConfig, adapt_target, pretrain_source

__version__ = "0.1.0"
