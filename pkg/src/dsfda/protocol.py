"""Desk-scale synthetic run of every setting: source-only, neutral-only, SFDA, k-shot, oracle, two-stage."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import AUDIT, DomainSplit, SynthConfig, synth_generate
from .evaluation import MetricsReport, evaluate
from .networks import DSFDAModel, ModelConfig
from .prototypes import ClusterParams, pool_from_model, select_prototypes
from .training import (
    AdaptationMode, TrainConfig, adapt_target, neutral_only_finetune, oracle_finetune, pretrain_source,
    two_stage_adapt,
)

logger = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    n_source: int = 8
    n_target: int = 2
    n_expressions: int = 2
    frames_per_cell: int = 40
    source_holdout: float = 0.2
    image_size: int = 32
    noise_std: float = 0.05
    width: int = 32
    feature_hw: int = 16
    norm: str = "instance"
    source_lr: float = 1e-3
    source_epochs: int = 30
    adapt_lr: float = 1e-3
    adapt_epochs: int = 25
    batch_size: int = 32
    augment: bool = False
    prototype_method: str = "km-sub"
    # absolute expression strain every target identity shows at rest
    target_rest: float = 0.55
    synth: dict = field(default_factory=lambda: dict(resting_spread=1.0, style_spread=0.6))


@dataclass
class Splits:
    source: DomainSplit
    source_test: DomainSplit
    targets: dict[int, dict[str, DomainSplit]]


def make_splits(cfg: DeskConfig, seed: int) -> Splits:
    """Source identities train/held-out; each target: neutral adapt, labeled oracle pool, test."""
    synth = SynthConfig(
        n_identities=cfg.n_source + cfg.n_target, n_expressions=cfg.n_expressions,
        frames_per_cell=cfg.frames_per_cell, image_size=cfg.image_size, noise_std=cfg.noise_std,
        seed=seed, n_shifted=cfg.n_target, rest_intensity=cfg.target_rest, **cfg.synth,
    )
    data = synth_generate(synth)
    pos = np.array([int(p.rsplit("/", 1)[1]) for p in data.paths])
    src_ids = range(cfg.n_source)
    n_train = int(round(cfg.frames_per_cell * (1 - cfg.source_holdout)))
    source = data.select(pos < n_train, subjects=src_ids)
    source_test = data.select(pos >= n_train, subjects=src_ids, role="target-test")
    half = cfg.frames_per_cell // 2
    targets = {}
    for t in range(cfg.n_source, cfg.n_source + cfg.n_target):
        targets[t] = dict(
            neutral=data.select(pos < half, subjects=[t], expressions=[0], role="target-adapt"),
            labeled=data.select(pos < half, subjects=[t], role="target-test"),
            test=data.select(pos >= half, subjects=[t], role="target-test"),
        )
    return Splits(source, source_test, targets)


def model_config(cfg: DeskConfig) -> ModelConfig:
    return ModelConfig(c_id=cfg.n_source, c_exp=cfg.n_expressions, image_size=cfg.image_size,
                       width=cfg.width, feature_hw=cfg.feature_hw, norm=cfg.norm)


def adapt_config(cfg: DeskConfig, seed: int, phase: str = "adapt") -> TrainConfig:
    return TrainConfig(phase=phase, learning_rate=cfg.adapt_lr, epochs=cfg.adapt_epochs,
                       batch_size=cfg.batch_size, seed=seed, augment=cfg.augment)


@dataclass
class ProtocolResult:
    seed: int
    reports: dict[str, list[MetricsReport]]
    source_accuracy: float
    audit: dict[str, int]
    seconds: float

    def accuracy(self, setting: str) -> float:
        """Overall accuracy averaged over target subjects."""
        return float(np.mean([r.average for r in self.reports[setting]]))

    def class_accuracy(self, setting: str, c: int) -> float:
        return float(np.mean([r.class_accuracy(c) for r in self.reports[setting]]))

    def summary(self) -> dict[str, float]:
        return {s: self.accuracy(s) for s in self.reports}


SETTINGS = ("source-only", "neutral-only", "sfda", "k-shot", "oracle", "two-stage")


def run_protocol(seed: int, cfg: DeskConfig | None = None, settings=SETTINGS,
                 source_model: DSFDAModel | None = None) -> ProtocolResult:
    cfg = cfg or DeskConfig()
    t0 = time.time()
    torch.manual_seed(seed)
    splits = make_splits(cfg, seed)
    if source_model is None:
        src_cfg = TrainConfig(phase="source", learning_rate=cfg.source_lr, epochs=cfg.source_epochs,
                              batch_size=cfg.batch_size, seed=seed, augment=cfg.augment)
        source_model = pretrain_source(splits.source, src_cfg, model_config(cfg))
    src_acc = evaluate(source_model, splits.source_test).average

    pool = pool_from_model(source_model, splits.source)
    protos = select_prototypes(pool, cfg.prototype_method, ClusterParams(seed=seed))
    reports: dict[str, list] = {s: [] for s in settings}
    audit = {}
    for t, sp in splits.targets.items():
        for s in settings:
            if s == "source-only":
                m = source_model
            elif s == "neutral-only":
                m = neutral_only_finetune(source_model, sp["neutral"], adapt_config(cfg, seed, "neutral-only"))
            elif s == "oracle":
                m = oracle_finetune(source_model, sp["labeled"], adapt_config(cfg, seed, "oracle"))
            elif s == "two-stage":
                m = two_stage_adapt(source_model, sp["neutral"], adapt_config(cfg, seed, "two-stage"))
            elif s == "sfda":
                AUDIT.reset()
                m = adapt_target(source_model, sp["neutral"], AdaptationMode(), adapt_config(cfg, seed))
                audit["sfda"] = AUDIT["source"]
            elif s == "k-shot":
                AUDIT.reset()
                mode = AdaptationMode("k-shot", len(protos), protos, splits.source)
                m = adapt_target(source_model, sp["neutral"], mode, adapt_config(cfg, seed))
                audit["k-shot"] = AUDIT["source"]
            else:
                raise ValueError(s)
            reports[s].append(evaluate(m, sp["test"], s))
    res = ProtocolResult(seed, reports, src_acc, audit, time.time() - t0)
    logger.info("seed %d: %s (%.0fs)", seed, {k: round(v, 2) for k, v in res.summary().items()}, res.seconds)
    return res
