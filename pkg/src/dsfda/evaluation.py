"""Per-subject accuracy, image-quality metrics and embedding export."""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from .data import DataError, DomainSplit
from .networks import DSFDAModel, embed_split

logger = logging.getLogger(__name__)

SETTINGS = ("source-only", "sfda", "k-shot", "oracle", "neutral-only", "two-stage")


@dataclass
class MetricsReport:
    per_subject: dict[int, dict]
    average: float
    setting: str = "source-only"

    def subject_accuracy(self, sid: int) -> float:
        return self.per_subject[sid]["overall"]

    def class_accuracy(self, c: int) -> float:
        """Mean over subjects of the accuracy on expression class ``c``."""
        vals = [r["per_class"][c] for r in self.per_subject.values() if c in r["per_class"]]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path: str | os.PathLike, config_hash: str = "") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["setting", "subject_id", "expression", "accuracy", "n_frames"])
            for sid in sorted(self.per_subject):
                r = self.per_subject[sid]
                for c in sorted(r["per_class"]):
                    w.writerow([self.setting, sid, c, f"{r['per_class'][c]:.6f}", r["per_class_n"][c]])
                w.writerow([self.setting, sid, "all", f"{r['overall']:.6f}", r["n"]])
            w.writerow([self.setting, "average", "all", f"{self.average:.6f}",
                        sum(r["n"] for r in self.per_subject.values())])
        return path


def report_from_predictions(subjects, labels, predictions, setting: str = "source-only") -> MetricsReport:
    subjects = np.asarray(subjects)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if len(subjects) == 0:
        raise DataError("cannot evaluate an empty split")
    per = {}
    for s in sorted(set(subjects.tolist())):
        m = subjects == s
        y, p = labels[m], predictions[m]
        per_class, per_n = {}, {}
        for c in sorted(set(y.tolist())):
            mc = y == c
            per_class[c] = 100.0 * float((p[mc] == c).mean())
            per_n[c] = int(mc.sum())
        per[int(s)] = dict(per_class=per_class, per_class_n=per_n,
                           overall=100.0 * float((p == y).mean()), n=int(m.sum()))
    avg = float(np.mean([r["overall"] for r in per.values()]))
    return MetricsReport(per, avg, setting)


@torch.no_grad()
def predict(model: DSFDAModel, split: DomainSplit, batch_size: int = 256) -> np.ndarray:
    emb = embed_split(model, split, batch_size)
    return model.classify_embedding(emb).predicted.numpy()


def evaluate(model: DSFDAModel, test: DomainSplit, setting: str = "source-only",
             video_vote: bool = False) -> MetricsReport:
    """Frame-level argmax accuracy per subject and class.

    With ``video_vote`` every frame takes the majority prediction of its video
    (frames sharing a parent directory in ``paths``).
    """
    if len(test) == 0:
        raise DataError("cannot evaluate an empty split")
    if test.role != "target-test":
        logger.warning("evaluating a %s split", test.role)
    preds = predict(model, test)
    if video_vote:
        groups = defaultdict(list)
        for i, p in enumerate(test.paths):
            groups[(int(test.subject_ids[i]), os.path.dirname(p))].append(i)
        for idx in groups.values():
            votes = np.bincount(preds[idx], minlength=model.cfg.c_exp)
            preds[idx] = int(np.argmax(votes))
    return report_from_predictions(test.subject_ids.numpy(), test.expressions.numpy(), preds, setting)


# --------------------------------------------------------------------------- image quality


@dataclass
class GenQualityReport:
    ssim: float
    psnr: float
    fid: float
    n_pairs: int

    def write_csv(self, path: str | os.PathLike, config_hash: str = "") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["ssim", "psnr", "fid", "n_pairs"])
            w.writerow([self.ssim, self.psnr, self.fid, self.n_pairs])
        return path


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W, got {tuple(x.shape)}")
    return x


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity of images in [-1, 1] (mapped to [0, 1]).

    Gaussian window, valid filtering, mean over positions and channels. Images
    smaller than the window use a window as large as the shorter side.
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = (a + 1) / 2, (b + 1) / 2
    c = a.shape[1]
    size = min(window, a.shape[-1], a.shape[-2])
    win = gaussian_window(size, sigma)[None, None].expand(c, 1, size, size)
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def psnr(a, b, max_val: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians.

    The trace of (cov_a cov_b)^1/2 is taken as the trace of the symmetric
    (cov_a^1/2 cov_b cov_a^1/2)^1/2, which has the same eigenvalues.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    ra = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(ra @ cov_b @ ra)
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))
    return max(val, 0.0)


def _stats(x: np.ndarray, eps: float):
    mu = x.mean(0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if np.linalg.eigvalsh(cov).min() <= 1e-12 * max(1.0, np.abs(cov).max()):
        logger.warning("singular feature covariance; adding %.1e * I", eps)
        cov = cov + eps * np.eye(len(cov))
    return mu, cov


def fid(set_a, set_b, extractor=None, eps: float = 1e-6) -> float:
    """FID between two sample sets (rows are feature vectors).

    Image batches (``N x 3 x H x W``) are embedded with ``extractor`` first,
    e.g. a trained model's ``encode_expression``.
    """
    def feats(s):
        s = torch.as_tensor(s) if not isinstance(s, np.ndarray) else s
        if isinstance(s, torch.Tensor):
            if s.ndim == 4:
                if extractor is None:
                    raise ValueError("image sets need a feature extractor")
                with torch.no_grad():
                    s = extractor(s.to(torch.float32))
            s = s.detach().cpu().numpy()
        s = np.asarray(s, dtype=np.float64)
        return s.reshape(len(s), -1)

    a, b = feats(set_a), feats(set_b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("FID needs at least two samples per set")
    return fid_from_stats(*_stats(a, eps), *_stats(b, eps))


def generation_quality(generated: torch.Tensor, reference: torch.Tensor, extractor) -> GenQualityReport:
    """Paired SSIM/PSNR and set-level FID in the extractor's feature space."""
    if generated.shape != reference.shape:
        raise ValueError("generated and reference batches must be paired")
    s = float(np.mean([ssim(g, r) for g, r in zip(generated, reference)]))
    p = psnr(generated, reference)
    return GenQualityReport(s, p, fid(generated, reference, extractor), len(generated))


# --------------------------------------------------------------------------- embeddings


def export_embeddings(model: DSFDAModel, split: DomainSplit) -> pd.DataFrame:
    emb = embed_split(model, split).numpy()
    df = pd.DataFrame(emb, columns=[f"e{i}" for i in range(emb.shape[1])])
    df.insert(0, "expression", split.expressions.numpy())
    df.insert(0, "subject_id", split.subject_ids.numpy())
    return df


def project_2d(embeddings, labels, seed: int = 0) -> pd.DataFrame:
    """t-SNE projection to (x, y, class) with a fixed seed."""
    from sklearn.manifold import TSNE

    x = np.asarray(embeddings, dtype=np.float64)
    perplexity = float(min(30.0, max(1.0, (len(x) - 1) / 3)))
    xy = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(x)
    return pd.DataFrame({"x": xy[:, 0], "y": xy[:, 1], "class": np.asarray(labels)})


def class_separation(embeddings, labels) -> float:
    """Mean inter-class distance over mean intra-class distance."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0))
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(x), dtype=bool)
    return float(d[~same].mean() / d[same & off].mean())


def mean_cosine(embeddings, labels) -> tuple[float, float]:
    """(mean within-class, mean across-class) cosine similarity."""
    x = np.asarray(embeddings, dtype=np.float64)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    sim = x @ x.T
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(x), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
