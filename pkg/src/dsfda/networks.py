"""Encoders, shared decoder, discriminator heads, expression classifier and checkpoints."""

from __future__ import annotations

import io
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .data import DataError, DomainSplit

CHECKPOINT_FORMAT = "dsfda-ckpt/1"
BACKBONES = ("small-cnn", "inception-v3")


@dataclass
class ModelConfig:
    c_id: int
    c_exp: int = 2
    image_size: int = 128
    backbone: str = "small-cnn"
    width: int = 64          # channels of the identity feature map
    embed_dim: int = 64      # expression embedding size
    feat_dim: int = 128      # identity discriminator penultimate features
    feature_hw: int = 8      # spatial side of the identity feature map
    norm: str = "instance"   # instance | instance-stem | none

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "inception-v3":
            raise NotImplementedError(
                "inception-v3 is a declared backbone id but no weights or graph ship with this package"
            )
        if self.c_id < 1 or self.c_exp < 2:
            raise ValueError("need c_id >= 1 and c_exp >= 2")
        ratio = self.image_size // self.feature_hw
        if self.image_size % self.feature_hw or ratio & (ratio - 1) or ratio < 1:
            raise ValueError("image_size must be feature_hw times a power of two")
        if self.n_down > 4:
            raise ValueError("small-cnn supports at most 4 downsampling blocks")

    @property
    def n_down(self) -> int:
        return int(round(math.log2(self.image_size // self.feature_hw)))


def _conv_block(cin, cout, stride, norm=True):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


class Trunk(nn.Module):
    """Four conv blocks; the first ``n_down`` halve the resolution."""

    def __init__(self, width: int, n_down: int, norm: str = "instance"):
        super().__init__()
        chans = [3, width // 4, width // 2, width, width]
        use = {"instance": [True] * 4, "instance-stem": [False, True, True, True], "none": [False] * 4}[norm]
        self.blocks = nn.Sequential(*[
            _conv_block(chans[i], chans[i + 1], 2 if i < n_down else 1, use[i]) for i in range(4)
        ])

    def forward(self, x):
        return self.blocks(x)


class IdentityEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = Trunk(cfg.width, cfg.n_down, cfg.norm)

    def forward(self, x):
        return self.trunk(x)


class ExpressionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = Trunk(cfg.width, cfg.n_down, cfg.norm)
        self.proj = nn.Linear(cfg.width, cfg.embed_dim)

    def forward(self, x):
        h = self.trunk(x).mean(dim=(2, 3))
        return self.proj(h)


class Decoder(nn.Module):
    """Identity map with the broadcast expression embedding concatenated, upsampled to an image.

    No normalization layers: instance norm right after the fusion conv would
    subtract the spatially constant expression contribution.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.width
        self.fuse = nn.Sequential(
            nn.Conv2d(w + cfg.embed_dim, w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, w, 3, padding=1), nn.LeakyReLU(0.2),
        )
        ups, c = [], w
        for _ in range(cfg.n_down):
            nc = max(c // 2, 8)
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, nc, 3, padding=1), nn.LeakyReLU(0.2)]
            c = nc
        self.up = nn.Sequential(*ups)
        self.out = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, d_id, d_exp):
        b, _, h, w = d_id.shape
        z = d_exp[:, :, None, None].expand(b, d_exp.shape[1], h, w)
        return torch.tanh(self.out(self.up(self.fuse(torch.cat([d_id, z], dim=1)))))


@dataclass
class ClassifierOutput:
    logits: torch.Tensor
    softmax: torch.Tensor

    @property
    def predicted(self) -> torch.Tensor:
        return self.softmax.argmax(dim=-1)


@dataclass
class SourcePrototypes:
    embeddings: torch.Tensor  # c_exp x embed_dim
    counts: list[int]

    def __post_init__(self):
        if self.embeddings.ndim != 2 or len(self.counts) != self.embeddings.shape[0]:
            raise ValueError("prototype embeddings must be c_exp x dim with one count per class")
        if not torch.isfinite(self.embeddings).all():
            raise ValueError("prototype embeddings must be finite")
        if min(self.counts) < 1:
            raise ValueError("every prototype needs at least one contributing frame")


class DSFDAModel(nn.Module):
    """Generator (two encoders + shared decoder), two discriminators and the classifier.

    The discriminators reuse the encoder trunks; only their heads are separate.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.enc_id = IdentityEncoder(cfg)
        self.enc_exp = ExpressionEncoder(cfg)
        self.decoder = Decoder(cfg)
        flat = cfg.width * cfg.feature_hw ** 2
        self.did_feat = nn.Sequential(nn.Flatten(), nn.Linear(flat, cfg.feat_dim), nn.LeakyReLU(0.2))
        self.did_out = nn.Linear(cfg.feat_dim, cfg.c_id + 1)
        self.dexp_head = nn.Sequential(nn.Linear(cfg.embed_dim, cfg.embed_dim), nn.LeakyReLU(0.2),
                                       nn.Linear(cfg.embed_dim, cfg.c_exp))
        self.cls_head = nn.Linear(cfg.embed_dim, cfg.c_exp)
        nn.init.normal_(self.cls_head.weight, std=1e-3)
        nn.init.zeros_(self.cls_head.bias)
        self.prototypes: SourcePrototypes | None = None

    def _check(self, x):
        s = self.cfg.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ValueError(f"expected N x 3 x {s} x {s} input, got {tuple(x.shape)}")

    # parameter groups used by the alternating optimizers
    def generator_parameters(self):
        return [*self.enc_id.parameters(), *self.enc_exp.parameters(), *self.decoder.parameters()]

    def discriminator_parameters(self, with_exp: bool = True):
        params = [*self.enc_id.parameters(), *self.did_feat.parameters(), *self.did_out.parameters()]
        if with_exp:
            params += [*self.enc_exp.parameters(), *self.dexp_head.parameters()]
        return params

    def classifier_parameters(self, with_encoder: bool = True):
        head = [*self.cls_head.parameters()]
        return [*self.enc_exp.parameters(), *head] if with_encoder else head

    def encode_identity(self, x):
        self._check(x)
        return self.enc_id(x)

    def encode_expression(self, x):
        self._check(x)
        return self.enc_exp(x)

    def decode(self, d_id, d_exp):
        c, hw = self.cfg.width, self.cfg.feature_hw
        if d_id.ndim != 4 or tuple(d_id.shape[1:]) != (c, hw, hw):
            raise ValueError(f"identity map must be N x {c} x {hw} x {hw}, got {tuple(d_id.shape)}")
        if d_exp.ndim != 2 or d_exp.shape[1] != self.cfg.embed_dim or d_exp.shape[0] != d_id.shape[0]:
            raise ValueError(f"expression embedding must be N x {self.cfg.embed_dim}, got {tuple(d_exp.shape)}")
        return self.decoder(d_id, d_exp)

    def generate(self, id_images, exp_images):
        return self.decode(self.encode_identity(id_images), self.encode_expression(exp_images))

    def disc_identity(self, x, frozen: bool = False):
        """Return (logits over c_id real identities + fake, penultimate features).

        ``frozen`` runs the discriminator with detached parameters so a generator
        update does not also train it.
        """
        self._check(x)
        if frozen:
            h = _frozen_call(self.enc_id, x)
            feat = _frozen_call(self.did_feat, h)
            return _frozen_call(self.did_out, feat), feat
        feat = self.did_feat(self.enc_id(x))
        return self.did_out(feat), feat

    def disc_expression(self, x, frozen: bool = False):
        self._check(x)
        if frozen:
            return _frozen_call(self.dexp_head, _frozen_call(self.enc_exp, x))
        return self.dexp_head(self.enc_exp(x))

    def classify_expression(self, x) -> ClassifierOutput:
        logits = self.cls_head(self.encode_expression(x))
        return ClassifierOutput(logits, logits.softmax(dim=-1))

    def classify_embedding(self, emb) -> ClassifierOutput:
        logits = self.cls_head(emb)
        return ClassifierOutput(logits, logits.softmax(dim=-1))


def _frozen_call(module: nn.Module, *args):
    params = {k: v.detach() for k, v in module.named_parameters()}
    buffers = dict(module.named_buffers())
    return functional_call(module, {**params, **buffers}, args)


@torch.no_grad()
def embed_split(model: DSFDAModel, split: DomainSplit, batch_size: int = 256) -> torch.Tensor:
    was = model.training
    model.eval()
    out = []
    for start in range(0, len(split), batch_size):
        idx = list(range(start, min(start + batch_size, len(split))))
        out.append(model.encode_expression(split.take(idx)))
    model.train(was)
    return torch.cat(out) if out else torch.empty(0, model.cfg.embed_dim)


def compute_prototypes(model: DSFDAModel, split: DomainSplit) -> SourcePrototypes:
    """Per-class mean expression embedding over all frames of each class."""
    emb = embed_split(model, split)
    protos, counts = [], []
    for c in range(model.cfg.c_exp):
        mask = split.expressions == c
        n = int(mask.sum())
        if n == 0:
            raise DataError(f"expression class {c} has no frames; cannot build its prototype")
        protos.append(emb[mask].mean(dim=0))
        counts.append(n)
    return SourcePrototypes(torch.stack(protos), counts)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: DSFDAModel, path: str | os.PathLike, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    protos = model.prototypes
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "prototypes": None if protos is None else {"embeddings": protos.embeddings.clone(),
                                                    "counts": list(protos.counts)},
        "seed": seed,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[DSFDAModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    model = DSFDAModel(ModelConfig(**payload["config"]))
    sd = payload["state_dict"]
    dtype = next(iter(sd.values())).dtype
    model.to(dtype)
    model.load_state_dict(sd)
    if payload["prototypes"] is not None:
        model.prototypes = SourcePrototypes(payload["prototypes"]["embeddings"], payload["prototypes"]["counts"])
    return model, payload


def clone_model(model: DSFDAModel) -> DSFDAModel:
    buf = io.BytesIO()
    torch.save(model, buf)
    buf.seek(0)
    return torch.load(buf, weights_only=False)


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().flatten() for p in model.parameters()]).cpu().numpy()
