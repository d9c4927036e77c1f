"""Source pre-training, target adaptation and the reference fine-tuning settings."""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .data import (
    NEUTRAL, AugmentConfig, ConfigError, DataError, DomainSplit, LabelingError, augment_images,
    sample_pairs,
)
from .losses import LossWeights, NumericError
from .networks import DSFDAModel, ModelConfig, clone_model, compute_prototypes
from .prototypes import PrototypeSet

logger = logging.getLogger(__name__)

PHASES = ("source", "adapt", "oracle", "neutral-only", "two-stage")
LOG_COLUMNS = ("step", "loss_rec", "loss_per", "loss_adv", "loss_gen", "loss_dis_id", "loss_dis_exp", "loss_cls")

# full-scale defaults per phase: (learning rate, epochs, batch size)
PHASE_DEFAULTS = {
    "source": (1e-5, 100, 32),
    "adapt": (1e-4, 25, 32),
    "oracle": (1e-4, 25, 32),
    "neutral-only": (1e-4, 25, 32),
    "two-stage": (1e-4, 25, 32),
}


@dataclass
class TrainConfig:
    phase: str = "source"
    learning_rate: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    n: int = 0  # number of training samples, filled in by the trainers
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    backbone: str = "small-cnn"
    augment: bool = True
    # share of real neutral frames in an adaptation batch (rest is generated)
    neutral_ratio: float = 0.5
    freeze_encoder: bool = False  # adaptation: update only the classifier head
    prototype_noise: float = 0.01
    # adaptation: also show the classifier generated neutral frames (label 0) so
    # that generator artifacts alone do not predict the non-neutral label
    generated_neutral: bool = False
    # k-shot: also train the classifier on the real prototype frames
    prototypes_in_classifier: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        lr, ep, bs = PHASE_DEFAULTS[self.phase]
        self.learning_rate = lr if self.learning_rate is None else self.learning_rate
        self.epochs = ep if self.epochs is None else self.epochs
        self.batch_size = bs if self.batch_size is None else self.batch_size
        self.validate()

    def validate(self) -> None:
        if self.learning_rate < 0 or (self.learning_rate == 0 and self.phase == "source"):
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.neutral_ratio < 1.0:
            raise ConfigError("neutral_ratio must lie in (0, 1)")


@dataclass
class AdaptationMode:
    kind: str = "embedding-prototype"
    k: int = 0
    prototypes: PrototypeSet | None = None
    source: DomainSplit | None = None  # image store the k-shot prototypes point into

    def validate(self, c_exp: int) -> None:
        if self.kind == "embedding-prototype":
            return
        if self.kind != "k-shot":
            raise ConfigError(f"unknown adaptation mode {self.kind!r}")
        if self.prototypes is None or self.source is None:
            raise ConfigError("k-shot adaptation needs a PrototypeSet and its source image store")
        k = len(self.prototypes)
        if self.k and self.k != k:
            raise ConfigError(f"k={self.k} but the prototype set has {k} entries")
        if k < 1:
            raise ConfigError("k-shot adaptation needs k >= 1")
        missing = set(range(1, c_exp)) - {e.expression for e in self.prototypes.entries}
        if missing:
            raise ConfigError(f"prototype set has no entry for expression class(es) {sorted(missing)}")


class LossLog:
    """Per-step loss records; writes the run's loss CSV."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, step: int, **values) -> None:
        row = {c: float("nan") for c in LOG_COLUMNS}
        row["step"] = step
        for k, v in values.items():
            if k not in row:
                raise KeyError(k)
            v = float(v)
            if not math.isfinite(v):
                raise NumericError(f"{k} diverged to {v} at step {step}")
            row[k] = v
        self.rows.append(row)

    def epoch_means(self, first_row: int) -> dict:
        block = self.rows[first_row:]
        out = {}
        for c in LOG_COLUMNS[1:]:
            vals = [r[c] for r in block if not math.isnan(r[c])]
            if vals:
                out[c] = float(np.mean(vals))
        return out

    def write_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})
        return path


def _adam(params, lr):
    # parameters shared between groups appear once per optimizer
    uniq, seen = [], set()
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            uniq.append(p)
    return torch.optim.Adam(uniq, lr=lr)


def _step(model, opt, loss):
    model.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def _augment(x, gen, cfg: TrainConfig):
    return augment_images(x, gen, AugmentConfig(enabled=cfg.augment))


def _log_epoch(log: LossLog, phase: str, epoch: int, first_row: int, on_epoch: Callable | None, model) -> None:
    means = log.epoch_means(first_row)
    logger.info("%s epoch %d: %s", phase, epoch + 1, " ".join(f"{k}={v:.4f}" for k, v in means.items()))
    if on_epoch is not None:
        on_epoch(epoch, model, means)


def _require_all_classes(split: DomainSplit) -> None:
    present = set(split.expressions.tolist())
    missing = sorted(set(range(split.c_exp)) - present)
    if missing:
        raise DataError(f"split is missing expression class(es) {missing}")


def _require_neutral(neutral: DomainSplit) -> None:
    if len(neutral) == 0:
        raise DataError("adaptation split is empty")
    if neutral.role != "target-adapt":
        raise ConfigError(f"adaptation needs a target-adapt split, got role {neutral.role!r}")
    if bool((neutral.expressions != NEUTRAL).any()):
        raise LabelingError("adaptation split contains non-neutral frames")


# --------------------------------------------------------------------------- source


def pretrain_source(split: DomainSplit, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                    log: LossLog | None = None, on_epoch: Callable | None = None) -> DSFDAModel:
    """Adversarial disentanglement training on labeled source frames.

    Per batch: discriminators, then generator, then classifier, one step each.
    Class-mean expression prototypes are stored on the returned model.
    """
    if split.role != "source":
        raise ConfigError(f"pre-training needs a source split, got role {split.role!r}")
    _require_all_classes(split)
    c_id = len(split.subjects())
    if split.subjects() != list(range(c_id)):
        raise LabelingError("source subject ids must be contiguous from 0")
    cfg.n = len(split)
    torch.manual_seed(cfg.seed)
    model_cfg = model_cfg or ModelConfig(c_id=c_id, c_exp=split.c_exp, image_size=split.image_size,
                                         backbone=cfg.backbone)
    if model_cfg.c_id != c_id or model_cfg.c_exp != split.c_exp:
        raise ConfigError("model config class counts disagree with the source split")
    model = DSFDAModel(model_cfg)
    model.train()
    log = log if log is not None else LossLog()
    w = cfg.weights
    opt_d = _adam(model.discriminator_parameters(), cfg.learning_rate)
    opt_g = _adam(model.generator_parameters(), cfg.learning_rate)
    opt_c = _adam(model.classifier_parameters(), cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    fake = torch.full((cfg.batch_size,), c_id, dtype=torch.long)
    step = 0
    for epoch in range(cfg.epochs):
        first = len(log.rows)
        for batch in sample_pairs(split, cfg.batch_size, cfg.seed):
            x_id = _augment(batch.id_images, gen, cfg)
            x_exp = _augment(batch.exp_images, gen, cfg)
            y_id, y_exp = batch.id_subjects, batch.exp_expressions
            parts = source_step(model, x_id, y_id, x_exp, y_exp, fake[:len(y_id)], w, opt_d, opt_g, opt_c)
            log.add(step, **parts)
            step += 1
        _log_epoch(log, "source", epoch, first, on_epoch, model)
    model.eval()
    model.prototypes = compute_prototypes(model, split)
    return model


def source_step(model, x_id, y_id, x_exp, y_exp, fake, w, opt_d, opt_g, opt_c) -> dict:
    # (a) discriminators
    with torch.no_grad():
        x_g = model.generate(x_id, x_exp)
    real_logits, _ = model.disc_identity(x_id)
    fake_logits, _ = model.disc_identity(x_g)
    l_did = L.loss_disc_id(real_logits, y_id, fake_logits, fake)
    l_dexp = L.loss_disc_exp(model.disc_expression(x_exp), y_exp)
    _step(model, opt_d, l_did + l_dexp)

    # (b) generator with the swap-back reconstruction cycle
    d_id_id = model.encode_identity(x_id)
    d_id_exp = model.encode_identity(x_exp)
    e_id = model.encode_expression(x_id)
    e_exp = model.encode_expression(x_exp)
    x_g = model.decode(d_id_id, e_exp)
    rec_id = model.decode(model.encode_identity(x_g), e_id)
    rec_exp = model.decode(d_id_exp, model.encode_expression(x_g))
    l_rec = L.loss_rec(rec_id, x_id, rec_exp, x_exp)
    g_logits, f_g = model.disc_identity(x_g, frozen=True)
    with torch.no_grad():
        _, f_real = model.disc_identity(x_id)
    l_per = L.loss_per(f_g, f_real)
    l_adv = L.loss_adv(g_logits, y_id, model.disc_expression(x_g, frozen=True), y_exp, w)
    l_gen = L.loss_gen(l_rec, l_per, l_adv, w)
    _step(model, opt_g, l_gen)

    # (c) classifier on real frames
    l_cls = L.loss_cls(model.classify_expression(x_exp).logits, y_exp)
    _step(model, opt_c, l_cls)
    return dict(loss_rec=l_rec.item(), loss_per=l_per.item(), loss_adv=l_adv.item(), loss_gen=l_gen.item(),
                loss_dis_id=l_did.item(), loss_dis_exp=l_dexp.item(), loss_cls=l_cls.item())


# --------------------------------------------------------------------------- adaptation


@torch.no_grad()
def pseudo_identity(model: DSFDAModel, images: torch.Tensor) -> int:
    """Source identity class the identity discriminator finds closest to the target subject."""
    logits, _ = model.disc_identity(images)
    probs = logits[:, :-1].softmax(dim=-1).mean(dim=0)
    return int(probs.argmax())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    nb = max(1, -(-n // batch_size))
    pad = nb * batch_size - n
    if pad and n >= batch_size:
        perm = np.concatenate([perm, perm[:pad]])
    for b in range(nb):
        yield torch.as_tensor(perm[b * batch_size:(b + 1) * batch_size])


def adapt_target(model: DSFDAModel, neutral: DomainSplit, mode: AdaptationMode, cfg: TrainConfig,
                 log: LossLog | None = None, on_epoch: Callable | None = None,
                 dump_dir: str | os.PathLike | None = None) -> DSFDAModel:
    """One-stage generation and adaptation from neutral target frames.

    Generated frames carry the target identity and a source expression, either
    a stored class prototype embedding or the embedding of a k-shot prototype
    image. The expression discriminator head is never updated.
    """
    _require_neutral(neutral)
    if model.prototypes is None:
        raise ConfigError("checkpoint carries no source prototypes")
    mode.validate(model.cfg.c_exp)
    cfg.n = len(neutral)
    model = clone_model(model)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    w = cfg.weights
    c_exp = model.cfg.c_exp
    log = log if log is not None else LossLog()

    proto_imgs = proto_exp = proto_sid = None
    if mode.kind == "k-shot":
        idx = [e.index for e in mode.prototypes.entries]
        proto_imgs = mode.source.take(idx)  # the only source images read
        proto_exp = torch.as_tensor([e.expression for e in mode.prototypes.entries])
        proto_sid = torch.as_tensor([e.subject_id for e in mode.prototypes.entries])

    all_t = neutral.take(list(range(len(neutral))))
    y_pseudo = pseudo_identity(model, all_t)
    logger.info("target subject mapped to source identity class %d", y_pseudo)

    model.train()
    opt_d = _adam(model.discriminator_parameters(with_exp=False), cfg.learning_rate)
    opt_g = _adam(model.generator_parameters(), cfg.learning_rate)
    opt_c = _adam(model.classifier_parameters(not cfg.freeze_encoder), cfg.learning_rate)
    protos = model.prototypes.embeddings
    n_real = max(1, int(round(cfg.batch_size * cfg.neutral_ratio)))
    n_gen = max(1, cfg.batch_size - n_real)
    fake_class = model.cfg.c_id
    step = 0
    for epoch in range(cfg.epochs):
        first = len(log.rows)
        for bidx in _batches(len(neutral), n_real, rng):
            x_t = _augment(all_t[bidx], gen, cfg)
            # identity inputs for generation: target frames, cycled to n_gen
            gi = torch.as_tensor(rng.integers(0, len(neutral), n_gen))
            x_src = _augment(all_t[gi], gen, cfg)
            y_t = torch.full((len(bidx),), y_pseudo, dtype=torch.long)
            y_g_id = torch.full((n_gen,), y_pseudo, dtype=torch.long)
            if mode.kind == "k-shot":
                pi = torch.as_tensor(rng.integers(0, len(proto_imgs), n_gen))
                x_p = proto_imgs[pi]
                y_g = proto_exp[pi]
            else:
                y_g = torch.as_tensor(rng.integers(1, c_exp, n_gen))
                noise = torch.randn(n_gen, protos.shape[1], generator=gen) * cfg.prototype_noise
                d_s = protos[y_g] + noise

            # (a) identity discriminator; the expression head stays frozen
            with torch.no_grad():
                e_g = model.encode_expression(x_p) if mode.kind == "k-shot" else d_s
                x_g = model.decode(model.encode_identity(x_src), e_g)
            real_x, real_y = x_t, y_t
            if mode.kind == "k-shot":
                real_x, real_y = torch.cat([x_t, x_p]), torch.cat([y_t, proto_sid[pi]])
            real_logits, _ = model.disc_identity(real_x)
            fake_logits, _ = model.disc_identity(x_g)
            l_did = L.loss_disc_id(real_logits, real_y, fake_logits, torch.full((n_gen,), fake_class))
            _step(model, opt_d, l_did)

            # (b) generator
            d_t = model.encode_identity(x_src)
            e_t = model.encode_expression(x_src)
            e_g = model.encode_expression(x_p) if mode.kind == "k-shot" else d_s
            x_g = model.decode(d_t, e_g)
            rec_id = model.decode(model.encode_identity(x_g), e_t)
            if mode.kind == "k-shot":
                rec_exp = model.decode(model.encode_identity(x_p), model.encode_expression(x_g))
                l_rec = L.loss_rec(rec_id, x_src, rec_exp, x_p)
            else:
                l_rec = L.loss_rec(rec_id, x_src)
            g_logits, f_g = model.disc_identity(x_g, frozen=True)
            with torch.no_grad():
                _, f_real = model.disc_identity(x_src)
            l_per = L.loss_per(f_g, f_real)
            l_adv = L.loss_adv(g_logits, y_g_id, model.disc_expression(x_g, frozen=True), y_g, w)
            l_gen = L.loss_gen(l_rec, l_per, l_adv, w)
            _step(model, opt_g, l_gen)

            # (c) classifier: real neutral as 0, generated as their prototype class
            xs = [x_t, x_g.detach()]
            ys = [torch.zeros(len(bidx), dtype=torch.long), y_g]
            if cfg.generated_neutral:
                with torch.no_grad():
                    e_n = protos[torch.zeros(n_gen, dtype=torch.long)]
                    e_n = e_n + torch.randn(e_n.shape, generator=gen) * cfg.prototype_noise
                    xs.append(model.decode(d_t.detach(), e_n))
                ys.append(torch.zeros(n_gen, dtype=torch.long))
            if mode.kind == "k-shot" and cfg.prototypes_in_classifier:
                xs.append(x_p)
                ys.append(proto_exp[pi])
            l_cls = L.loss_cls(model.classify_expression(torch.cat(xs)).logits, torch.cat(ys))
            _step(model, opt_c, l_cls)
            log.add(step, loss_rec=l_rec.item(), loss_per=l_per.item(), loss_adv=l_adv.item(),
                    loss_gen=l_gen.item(), loss_dis_id=l_did.item(), loss_cls=l_cls.item())
            step += 1
        if dump_dir is not None:
            _dump_generated(model, all_t[:8], dump_dir, epoch, mode, proto_imgs)
        _log_epoch(log, f"adapt[{mode.kind}]", epoch, first, on_epoch, model)
    model.eval()
    return model


@torch.no_grad()
def _dump_generated(model, x_t, dump_dir, epoch, mode, proto_imgs):
    from .data import to_pil
    out = Path(dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(x_t)
    if mode.kind == "k-shot":
        e = model.encode_expression(proto_imgs[torch.arange(n) % len(proto_imgs)])
    else:
        e = model.prototypes.embeddings[torch.full((n,), model.cfg.c_exp - 1)]
    g = model.decode(model.encode_identity(x_t), e)
    for i in range(n):
        to_pil(g[i]).save(out / f"epoch{epoch:03d}_{i:02d}.png")


def _finetune_classifier(model: DSFDAModel, images: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig,
                         log: LossLog | None, phase: str, on_epoch=None) -> DSFDAModel:
    model = clone_model(model)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = log if log is not None else LossLog()
    model.train()
    opt = _adam(model.classifier_parameters(not cfg.freeze_encoder), cfg.learning_rate)
    step = 0
    for epoch in range(cfg.epochs):
        first = len(log.rows)
        for bidx in _batches(len(images), cfg.batch_size, rng):
            x = _augment(images[bidx], gen, cfg)
            l_cls = L.loss_cls(model.classify_expression(x).logits, labels[bidx])
            if cfg.learning_rate > 0:
                _step(model, opt, l_cls)
            log.add(step, loss_cls=l_cls.item())
            step += 1
        _log_epoch(log, phase, epoch, first, on_epoch, model)
    model.eval()
    return model


def neutral_only_finetune(model: DSFDAModel, neutral: DomainSplit, cfg: TrainConfig,
                          log: LossLog | None = None, on_epoch=None) -> DSFDAModel:
    """Supervised fine-tune on neutral target frames alone; no generation."""
    _require_neutral(neutral)
    cfg.n = len(neutral)
    imgs = neutral.take(list(range(len(neutral))))
    return _finetune_classifier(model, imgs, neutral.expressions.clone(), cfg, log, "neutral-only", on_epoch)


def oracle_finetune(model: DSFDAModel, full_target: DomainSplit, cfg: TrainConfig,
                    log: LossLog | None = None, on_epoch=None) -> DSFDAModel:
    """Supervised fine-tune on fully labeled target frames (upper bound)."""
    if len(full_target) == 0:
        raise DataError("oracle split is empty")
    missing = sorted(set(range(full_target.c_exp)) - set(full_target.expressions.tolist()))
    if missing:
        warnings.warn(f"oracle target split lacks expression class(es) {missing}", stacklevel=2)
    cfg.n = len(full_target)
    imgs = full_target.take(list(range(len(full_target))))
    return _finetune_classifier(model, imgs, full_target.expressions.clone(), cfg, log, "oracle", on_epoch)


@torch.no_grad()
def synthesize_missing(model: DSFDAModel, neutral: DomainSplit, noise: float = 0.0,
                       seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen-generator pass: every neutral frame rendered with every non-neutral prototype."""
    model.eval()
    x = neutral.take(list(range(len(neutral))))
    d_id = model.encode_identity(x)
    gen = torch.Generator().manual_seed(seed)
    imgs, labels = [], []
    for c in range(1, model.cfg.c_exp):
        e = model.prototypes.embeddings[c].expand(len(x), -1)
        if noise > 0:
            e = e + torch.randn(e.shape, generator=gen) * noise
        imgs.append(model.decode(d_id, e))
        labels.append(torch.full((len(x),), c, dtype=torch.long))
    return torch.cat(imgs), torch.cat(labels)


def save_generated(images: torch.Tensor, labels: torch.Tensor, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"images": images.clone(), "labels": labels.clone()}, path)
    return path


def load_generated(path: str | os.PathLike) -> tuple[torch.Tensor, torch.Tensor]:
    d = torch.load(path, weights_only=True)
    return d["images"], d["labels"]


def two_stage_adapt(model: DSFDAModel, neutral: DomainSplit, cfg: TrainConfig,
                    out_dir: str | os.PathLike | None = None, log: LossLog | None = None,
                    on_epoch=None) -> DSFDAModel:
    """Generate a fixed non-neutral set once, then adapt the classifier on it plus real neutral frames."""
    _require_neutral(neutral)
    if model.prototypes is None:
        raise ConfigError("checkpoint carries no source prototypes")
    gen_imgs, gen_labels = synthesize_missing(model, neutral)
    if out_dir is not None:
        save_generated(gen_imgs, gen_labels, Path(out_dir) / "generated.pt")
        gen_imgs, gen_labels = load_generated(Path(out_dir) / "generated.pt")
    real = neutral.take(list(range(len(neutral))))
    images = torch.cat([real, gen_imgs])
    labels = torch.cat([neutral.expressions.clone(), gen_labels])
    cfg.n = len(images)
    return _finetune_classifier(model, images, labels, cfg, log, "two-stage", on_epoch)
