"""Objective terms of the disentangling generator, its discriminators and the classifier.

Each loss is a pure function of tensors and labels returning a scalar tensor.
All expectations are estimated by batch means.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 5.0
    lambda_per: float = 1.0
    lambda_adv1: float = 0.2
    lambda_adv2: float = 0.8

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass
class GeneratedBatch:
    images: torch.Tensor
    fake_labels: torch.Tensor
    id_labels: torch.Tensor
    exp_labels: torch.Tensor

    def __post_init__(self):
        n = self.images.shape[0]
        if not (len(self.fake_labels) == len(self.id_labels) == len(self.exp_labels) == n):
            raise ValueError("label vectors must match the generated batch length")


def _finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in loss input")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _finite(logits)
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    n_cls = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    return F.cross_entropy(logits, labels)


def loss_cls(logits, y_exp):
    """Expression classifier cross-entropy on real frames."""
    return cross_entropy(logits, y_exp)


def loss_disc_id(real_logits, y_id, fake_logits, y_fake):
    """Identity discriminator: real frames to their identity, generated frames to the fake class.

    Both logit tensors have ``c_id + 1`` columns; the fake class is the last one.
    """
    fake_class = real_logits.shape[-1] - 1
    y_fake = torch.as_tensor(y_fake, dtype=torch.long)
    if y_fake.numel() and bool((y_fake != fake_class).any()):
        raise ValueError(f"generated images must carry the fake label {fake_class}")
    y_id = torch.as_tensor(y_id, dtype=torch.long)
    if y_id.numel() and bool((y_id >= fake_class).any()):
        raise ValueError(f"real identity labels must lie in [0, {fake_class})")
    return cross_entropy(real_logits, y_id) + cross_entropy(fake_logits, y_fake)


def loss_disc_exp(real_logits, y_exp):
    """Expression discriminator on real frames only."""
    return cross_entropy(real_logits, y_exp)


def loss_rec(recon_id, img_id, recon_exp=None, img_exp=None):
    """Mean absolute error of both reconstructions; the expression term is optional."""
    _same_shape(recon_id, img_id)
    out = (recon_id - img_id).abs().mean()
    if recon_exp is not None:
        _same_shape(recon_exp, img_exp)
        out = out + (recon_exp - img_exp).abs().mean()
    return out


def loss_per(feat_gen, feat_id):
    """Mean squared difference of identity-discriminator features."""
    _same_shape(feat_gen, feat_id)
    return ((feat_gen - feat_id) ** 2).mean()


def loss_adv(disc_id_logits_on_gen, y_id, disc_exp_logits_on_gen, y_exp, w: LossWeights):
    """Generator reward for generated images recognized as their intended identity and expression."""
    return (w.lambda_adv1 * cross_entropy(disc_id_logits_on_gen, y_id)
            + w.lambda_adv2 * cross_entropy(disc_exp_logits_on_gen, y_exp))


def loss_gen(rec, per, adv, w: LossWeights):
    return w.lambda_rec * rec + w.lambda_per * per + adv
