"""Frames, domain splits, image preprocessing and the procedural face dataset."""

from __future__ import annotations

import colorsys
import csv
import io
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image

logger = logging.getLogger(__name__)

NEUTRAL = 0
ROLES = ("source", "target-adapt", "target-test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"}


class DataError(Exception):
    """Raised for unreadable, empty or inconsistently labeled data."""


class LabelingError(DataError):
    pass


class ConfigError(ValueError):
    pass


class AccessAudit:
    """Counts image tensors read out of splits, per split role.

    Adaptation code is only allowed to touch source images through prototypes;
    tests reset the counter and inspect it after a run.
    """

    def __init__(self):
        self.counts: Counter = Counter()

    def record(self, role: str, n: int) -> None:
        self.counts[role] += int(n)

    def reset(self) -> None:
        self.counts.clear()

    def __getitem__(self, role: str) -> int:
        return self.counts[role]


AUDIT = AccessAudit()


@dataclass(frozen=True)
class LabeledFrame:
    image: torch.Tensor
    subject_id: int
    expression: int
    path: str = ""


class DomainSplit:
    """Immutable, ordered collection of labeled frames of one domain role.

    Images are held as one stacked float tensor in [-1, 1]. Every read of image
    data goes through :meth:`take` so that reads can be audited.
    """

    def __init__(
        self,
        images: torch.Tensor,
        subject_ids: Sequence[int],
        expressions: Sequence[int],
        role: str,
        c_id: int,
        c_exp: int,
        paths: Sequence[str] | None = None,
        metadata: dict[int, dict] | None = None,
    ):
        if role not in ROLES:
            raise ConfigError(f"unknown split role {role!r}")
        images = torch.as_tensor(images, dtype=torch.float32)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"images must be N x 3 x H x W, got {tuple(images.shape)}")
        n = images.shape[0]
        sid = torch.as_tensor(np.asarray(subject_ids, dtype=np.int64))
        exp = torch.as_tensor(np.asarray(expressions, dtype=np.int64))
        if len(sid) != n or len(exp) != n:
            raise ValueError("label vectors must match the number of images")
        if n and (sid.min() < 0 or sid.max() >= c_id):
            raise LabelingError(f"subject ids must lie in [0, {c_id})")
        if n and (exp.min() < 0 or exp.max() >= c_exp):
            raise LabelingError(f"expression labels must lie in [0, {c_exp})")
        if role == "target-adapt" and n and bool((exp != NEUTRAL).any()):
            bad = int(torch.nonzero(exp != NEUTRAL)[0, 0])
            raise LabelingError(
                f"target-adapt split must be neutral-only; frame {bad} has expression {int(exp[bad])}"
            )
        self._images = images
        self._images.requires_grad_(False)
        self.subject_ids = sid
        self.expressions = exp
        self.role = role
        self.c_id = int(c_id)
        self.c_exp = int(c_exp)
        self.paths = list(paths) if paths is not None else [""] * n
        self.metadata = dict(metadata or {})

    def __len__(self) -> int:
        return self._images.shape[0]

    def __getitem__(self, i: int) -> LabeledFrame:
        img = self.take([i])[0]
        return LabeledFrame(img, int(self.subject_ids[i]), int(self.expressions[i]), self.paths[i])

    def __iter__(self) -> Iterator[LabeledFrame]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_size(self) -> int:
        return self._images.shape[-1]

    def take(self, indices) -> torch.Tensor:
        idx = torch.as_tensor(indices, dtype=torch.long)
        AUDIT.record(self.role, idx.numel())
        return self._images[idx]

    def subjects(self) -> list[int]:
        return sorted(set(self.subject_ids.tolist()))

    def select(self, mask=None, *, subjects=None, expressions=None, role=None) -> "DomainSplit":
        """Subset by boolean mask and/or subject / expression membership."""
        keep = torch.ones(len(self), dtype=torch.bool)
        if mask is not None:
            keep &= torch.as_tensor(mask, dtype=torch.bool)
        if subjects is not None:
            keep &= torch.isin(self.subject_ids, torch.as_tensor(list(subjects)))
        if expressions is not None:
            keep &= torch.isin(self.expressions, torch.as_tensor(list(expressions)))
        return self.subset(torch.nonzero(keep).flatten(), role=role)

    def subset(self, indices, role: str | None = None) -> "DomainSplit":
        """Frames at ``indices`` in that order."""
        idx = torch.as_tensor(indices, dtype=torch.long).flatten()
        # slicing internal storage is not an image read
        return DomainSplit(
            self._images[idx],
            self.subject_ids[idx],
            self.expressions[idx],
            role or self.role,
            self.c_id,
            self.c_exp,
            [self.paths[i] for i in idx.tolist()],
            self.metadata,
        )

    def with_role(self, role: str) -> "DomainSplit":
        return self.select(role=role)

    def export(self, out_dir: str | os.PathLike) -> Path:
        """Write one PNG per frame plus ``manifest.csv`` (path,subject_id,expression)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(len(self)):
            sid, exp = int(self.subject_ids[i]), int(self.expressions[i])
            rel = f"s{sid:03d}/e{exp}/{i:06d}.png"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            to_pil(self._images[i]).save(out / rel)
            rows.append((rel, sid, exp))
        manifest = out / "manifest.csv"
        with open(manifest, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "subject_id", "expression"])
            w.writerows(rows)
        return manifest


def load_manifest(path: str | os.PathLike, role: str = "source", c_id=None, c_exp=None,
                  image_size: int | None = None) -> DomainSplit:
    """Read a dataset written by :meth:`DomainSplit.export`."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"no frames found in {path}")
    imgs = [preprocess(path.parent / r["path"], image_size) for r in rows]
    sid = [int(r["subject_id"]) for r in rows]
    exp = [int(r["expression"]) for r in rows]
    return DomainSplit(
        torch.stack(imgs), sid, exp, role,
        c_id if c_id is not None else max(sid) + 1,
        c_exp if c_exp is not None else max(exp) + 1,
        [r["path"] for r in rows],
    )


# --------------------------------------------------------------------------- preprocessing


def preprocess(raw, size: int | None = 128) -> torch.Tensor:
    """Decode and resize an image to ``3 x size x size`` float in [-1, 1].

    Accepts encoded bytes, a path, a PIL image, an ``H x W x 3`` uint8 array or an
    already preprocessed float tensor (returned unchanged if the size matches).
    """
    if isinstance(raw, torch.Tensor) and raw.is_floating_point():
        x = raw.detach().to(torch.float32)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected a 3 x H x W tensor, got {tuple(x.shape)}")
        if size is not None and x.shape[-2:] != (size, size):
            x = F.interpolate(x[None], size=(size, size), mode="bilinear", align_corners=False)[0]
        return x.clamp(-1.0, 1.0)
    if isinstance(raw, (bytes, bytearray)):
        try:
            img = Image.open(io.BytesIO(raw))
            img.load()
        except Exception as exc:
            raise DataError(f"cannot decode image bytes: {exc}") from exc
    elif isinstance(raw, (str, os.PathLike)):
        try:
            img = Image.open(raw)
            img.load()
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise DataError(f"cannot decode image {raw}: {exc}") from exc
    elif isinstance(raw, Image.Image):
        img = raw
    elif isinstance(raw, np.ndarray):
        if raw.dtype != np.uint8:
            raise DataError(f"expected uint8 pixel array, got {raw.dtype}")
        img = Image.fromarray(raw)
    else:
        raise DataError(f"unsupported image input {type(raw).__name__}")
    img = img.convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_pil(image: torch.Tensor) -> Image.Image:
    arr = ((image.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(arr.permute(1, 2, 0).cpu().numpy())


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop_pad: float = 0.0625  # fraction of the side length
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def augment_images(images: torch.Tensor, gen: torch.Generator, cfg: AugmentConfig | None = None) -> torch.Tensor:
    """Random crop, horizontal flip and color jitter on a batch ``N x 3 x H x W``."""
    cfg = cfg or AugmentConfig()
    if not cfg.enabled:
        return images
    n, _, h, w = images.shape
    out = images
    pad = int(round(cfg.crop_pad * h))
    if pad > 0:
        padded = F.pad(out, (pad, pad, pad, pad), mode="replicate")
        offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=gen)
        out = torch.stack([padded[i, :, oy:oy + h, ox:ox + w] for i, (oy, ox) in enumerate(offs.tolist())])
    flip = torch.rand(n, generator=gen) < cfg.flip_prob
    out = torch.where(flip[:, None, None, None], out.flip(-1), out)
    # color adjustments act on [0, 1] intensities
    x = (out + 1.0) / 2.0
    b = 1.0 + (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1) * cfg.brightness
    c = 1.0 + (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1) * cfg.contrast
    s = 1.0 + (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1) * cfg.saturation
    x = x * b
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * c + mean
    gray = x.mean(dim=1, keepdim=True)
    x = (x - gray) * s + gray
    return (x.clamp(0, 1) * 2.0 - 1.0)


def augment(frame: LabeledFrame, seed: int, cfg: AugmentConfig | None = None) -> LabeledFrame:
    gen = torch.Generator().manual_seed(int(seed))
    img = augment_images(frame.image[None], gen, cfg)[0]
    return LabeledFrame(img, frame.subject_id, frame.expression, frame.path)


# --------------------------------------------------------------------------- pair sampling


@dataclass
class PairBatch:
    id_index: torch.Tensor
    exp_index: torch.Tensor
    id_images: torch.Tensor
    exp_images: torch.Tensor
    id_subjects: torch.Tensor
    id_expressions: torch.Tensor
    exp_subjects: torch.Tensor
    exp_expressions: torch.Tensor

    @property
    def size(self) -> int:
        return len(self.id_index)


class PairSampler:
    """Epoch-wise stream of identity/expression pairs drawn from one split.

    Both streams are independent permutations of the split; the last batch of
    an epoch is topped up from the head of the permutation so every frame is
    visited and all batches are full.
    """

    def __init__(self, split: DomainSplit, batch_size: int, seed: int):
        if len(split) == 0:
            raise DataError("cannot sample pairs from an empty split")
        if batch_size > len(split):
            raise ConfigError(f"batch_size {batch_size} exceeds split size {len(split)}")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.split = split
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return -(-len(self.split) // self.batch_size)

    def _order(self, rng: np.random.Generator) -> np.ndarray:
        n, bs = len(self.split), self.batch_size
        perm = rng.permutation(n)
        pad = len(self) * bs - n
        return np.concatenate([perm, perm[:pad]])

    def __iter__(self) -> Iterator[PairBatch]:
        rng = np.random.default_rng([self.seed, self.epoch])
        self.epoch += 1
        id_order = self._order(rng)
        exp_order = self._order(rng)
        s = self.split
        for b in range(len(self)):
            sl = slice(b * self.batch_size, (b + 1) * self.batch_size)
            i_idx = torch.as_tensor(id_order[sl])
            e_idx = torch.as_tensor(exp_order[sl])
            yield PairBatch(
                i_idx, e_idx, s.take(i_idx), s.take(e_idx),
                s.subject_ids[i_idx], s.expressions[i_idx],
                s.subject_ids[e_idx], s.expressions[e_idx],
            )


def sample_pairs(split: DomainSplit, batch_size: int, seed: int) -> PairSampler:
    return PairSampler(split, batch_size, seed)


# --------------------------------------------------------------------------- directory layouts


@dataclass
class LayoutRule:
    match: str
    expression: int
    start: int = 0
    stop: int | None = None


@dataclass
class LayoutDescriptor:
    """Maps frame directories (relative to the dataset root) to labels.

    Each rule is a regular expression over the relative directory path with a
    named group ``subject``; the first matching rule wins. ``start``/``stop``
    restrict which frames (by sorted position inside the directory) are kept.
    """

    rules: list[LayoutRule]
    subjects: dict[str, int] | None = None
    metadata: dict[str, dict] = field(default_factory=dict)
    image_size: int = 128
    c_exp: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutDescriptor":
        rules = [LayoutRule(**r) for r in d.get("rules", [])]
        if not rules:
            raise ConfigError("layout descriptor has no rules")
        return cls(rules, d.get("subjects"), d.get("metadata", {}) or {},
                   d.get("image_size", 128), d.get("c_exp"))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "LayoutDescriptor":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def label(self, rel_dir: str) -> tuple[str, LayoutRule] | None:
        for rule in self.rules:
            m = re.fullmatch(rule.match, rel_dir)
            if m:
                return m.group("subject"), rule
        return None


def biovid_layout(fps: int = 25, skip_seconds: float = 2.0, image_size: int = 128) -> LayoutDescriptor:
    """BioVid part A style: ``<subject>/BL1/*.png`` (neutral) and ``<subject>/PA4/*.png`` (pain).

    The leading ``skip_seconds`` of each recording are dropped.
    """
    skip = int(round(fps * skip_seconds))
    return LayoutDescriptor(
        rules=[
            LayoutRule(r"(?P<subject>[^/]+)/BL1", 0, start=skip),
            LayoutRule(r"(?P<subject>[^/]+)/PA4", 1, start=skip),
        ],
        image_size=image_size,
        c_exp=2,
    )


def load_directory(root: str | os.PathLike, layout: LayoutDescriptor, role: str = "source") -> DomainSplit:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    by_dir: dict[str, list[Path]] = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            by_dir.setdefault(p.parent.relative_to(root).as_posix(), []).append(p)
    if not by_dir:
        raise DataError(f"no frames found under {root}")

    labeled = []
    for rel_dir in sorted(by_dir):
        hit = layout.label(rel_dir)
        if hit is None:
            raise LabelingError(f"no layout rule matches directory {root / rel_dir}")
        subject, rule = hit
        files = sorted(by_dir[rel_dir])[rule.start:rule.stop]
        labeled.extend((f, subject, rule.expression) for f in files)
    if not labeled:
        raise DataError(f"no frames found under {root} after frame filters")

    if layout.subjects is not None:
        missing = sorted({s for _, s, _ in labeled} - set(layout.subjects))
        if missing:
            raise LabelingError(f"subject {missing[0]!r} has no id in the layout descriptor")
        sid_of = dict(layout.subjects)
    else:
        sid_of = {s: i for i, s in enumerate(sorted({s for _, s, _ in labeled}))}

    labeled.sort(key=lambda t: t[0].as_posix())
    images = torch.stack([preprocess(f, layout.image_size) for f, _, _ in labeled])
    sids = [sid_of[s] for _, s, _ in labeled]
    exps = [e for _, _, e in labeled]
    c_exp = layout.c_exp or max(r.expression for r in layout.rules) + 1
    meta = {sid_of[name]: m for name, m in layout.metadata.items() if name in sid_of}
    return DomainSplit(
        images, sids, exps, role, max(sid_of.values()) + 1, c_exp,
        [f.relative_to(root).as_posix() for f, _, _ in labeled], meta,
    )


# --------------------------------------------------------------------------- procedural faces


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 10
    n_expressions: int = 2
    frames_per_cell: int = 20
    image_size: int = 32
    noise_std: float = 0.05
    seed: int = 0
    # spread of the per-identity resting mouth shape and of how strongly each
    # identity expresses; these create subject-level shift between identities
    resting_spread: float = 0.5
    style_spread: float = 0.4
    # the last ``n_shifted`` identities show an absolute expression strain of
    # ``rest_intensity`` at rest (their neutral face already looks strained);
    # their own expression range is compressed into what is left above it
    n_shifted: int = 0
    rest_intensity: float = 0.0

    def validate(self) -> None:
        if self.n_identities < 2 or self.n_expressions < 2:
            raise ConfigError("need at least 2 identities and 2 expressions")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.frames_per_cell < 1:
            raise ConfigError("frames_per_cell must be >= 1")
        if not 0 <= self.n_shifted <= self.n_identities:
            raise ConfigError("n_shifted must lie in [0, n_identities]")
        if not 0.0 <= self.rest_intensity < 1.0:
            raise ConfigError("rest_intensity must lie in [0, 1)")


def _identity_params(rng: np.random.Generator, cfg: SynthConfig) -> dict:
    hue = rng.uniform(0.0, 1.0)
    skin = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.25, 0.6), rng.uniform(0.65, 0.95)))
    hair = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.3, 0.9), rng.uniform(0.1, 0.5)))
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.4), rng.uniform(0.15, 0.4)))
    return dict(
        skin=skin, hair=hair, bg=bg,
        cx=rng.uniform(-0.12, 0.12), cy=rng.uniform(-0.08, 0.08),
        rx=rng.uniform(0.55, 0.72), ry=rng.uniform(0.72, 0.88),
        hair_h=rng.uniform(0.15, 0.4),
        eye_dx=rng.uniform(0.2, 0.32), eye_r=rng.uniform(0.06, 0.1),
        mouth_w=rng.uniform(0.22, 0.36), lip=rng.uniform(0.35, 0.7),
        rest=rng.uniform(-cfg.resting_spread, cfg.resting_spread),
        style=rng.uniform(1.0 - cfg.style_spread, 1.0 + cfg.style_spread),
    )


def render_face(p: dict, intensity: float, size: int, shift=(0.0, 0.0), gain: float = 1.0,
                rest: float = 0.0) -> np.ndarray:
    """Render one face in [0, 1], ``size x size x 3``.

    ``intensity`` in [0, 1] drives the expression: mouth corners pulled down,
    lips parted, brows lowered and pinched, eyes narrowed. ``rest`` is an
    absolute strain already present at intensity 0, independent of the
    identity's expression style.
    """
    t = rest + (1.0 - rest) * intensity * p["style"]
    ax = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(ax, ax, indexing="ij")
    cx, cy = p["cx"] + shift[0], p["cy"] + shift[1]
    px = 2.0 / size  # one pixel in normalized units

    def soft(d, width=px):
        return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))

    img = np.broadcast_to(p["bg"], (size, size, 3)).copy()
    face_d = np.sqrt(((u - cx) / p["rx"]) ** 2 + ((v - cy) / p["ry"]) ** 2) - 1.0
    face = soft(face_d * p["rx"])[..., None]
    img = img * (1 - face) + p["skin"] * face
    hair = (soft(v - (cy - p["ry"] + p["hair_h"])) * face[..., 0])[..., None]
    img = img * (1 - hair) + p["hair"] * hair

    dark = np.zeros((size, size))
    eye_y = cy - 0.18 * p["ry"]
    eye_ry = p["eye_r"] * (1.0 - 0.55 * min(t, 1.2))
    for side in (-1, 1):
        ex = cx + side * p["eye_dx"]
        d = np.sqrt(((u - ex) / p["eye_r"]) ** 2 + ((v - eye_y) / max(eye_ry, 0.02)) ** 2) - 1
        dark = np.maximum(dark, soft(d * p["eye_r"]))
        # brow: short bar, lowered and tilted toward the nose by the expression
        bx = u - ex
        by = eye_y - 0.16 + 0.07 * t + side * bx * (-0.6 * t)
        bd = np.abs(v - by) - 0.025
        bmask = soft(np.abs(bx) - 0.13)
        dark = np.maximum(dark, soft(bd) * bmask)
    # mouth: parabola whose corners move with curvature; positive = smile
    mouth_y = cy + 0.5 * p["ry"]
    curv = 0.12 * (p["rest"] - 1.6 * t)
    mu = (u - cx) / p["mouth_w"]
    my = mouth_y - curv * mu ** 2
    thick = 0.03 + 0.035 * t
    md = np.abs(v - my) - thick
    mmask = soft(np.abs(mu) - 1.0, px / p["mouth_w"])
    mouth = soft(md) * mmask
    img = img * (1 - dark[..., None]) + (img * 0.15) * dark[..., None]
    img = img * (1 - mouth[..., None]) + (p["skin"] * p["lip"]) * mouth[..., None]
    return np.clip(img * gain, 0.0, 1.0)


def synth_generate(cfg: SynthConfig) -> DomainSplit:
    """Procedural faces: identity sets color and geometry, expression a local deformation.

    Identity and expression are sampled independently; identical configs yield
    bit-identical images. Returned with role ``source``; use :meth:`DomainSplit.select`
    to carve out target subjects.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    idents = [_identity_params(rng, cfg) for _ in range(cfg.n_identities)]
    imgs, sids, exps, paths = [], [], [], []
    first_shifted = cfg.n_identities - cfg.n_shifted
    for s, p in enumerate(idents):
        rest = cfg.rest_intensity if s >= first_shifted else 0.0
        for e in range(cfg.n_expressions):
            level = e / (cfg.n_expressions - 1)
            for k in range(cfg.frames_per_cell):
                shift = rng.normal(0.0, 0.02, size=2)
                gain = 1.0 + rng.normal(0.0, 0.03)
                img = render_face(p, level, cfg.image_size, shift, gain, rest) * 2.0 - 1.0
                if cfg.noise_std > 0:
                    img = img + rng.normal(0.0, cfg.noise_std, img.shape)
                imgs.append(np.clip(img, -1, 1).astype(np.float32).transpose(2, 0, 1))
                sids.append(s)
                exps.append(e)
                paths.append(f"s{s:03d}/e{e}/{k:04d}")
    return DomainSplit(
        torch.from_numpy(np.stack(imgs)), sids, exps, "source",
        cfg.n_identities, cfg.n_expressions, paths,
    )
