"""Selection of real source frames to serve as expression prototypes in the k-shot setting."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

METHODS = ("rnd", "match", "top", "db-all", "km-all", "db-sub", "km-sub", "db-d", "db-cls")
NOISE = -1


@dataclass
class ClusterParams:
    k: int | None = None
    eps: float | None = None
    min_samples: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


@dataclass
class PrototypeEntry:
    index: int          # row in the source pool (split index or embedding row)
    ref: str            # frame path, or "#<row>" when only embeddings are known
    subject_id: int
    expression: int
    embedding: np.ndarray


@dataclass
class PrototypeSet:
    entries: list[PrototypeEntry]
    method: str
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __post_init__(self):
        idx = [e.index for e in self.entries]
        if len(set(idx)) != len(idx):
            raise ValueError("prototype entries must be distinct frames")

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]

    def write(self, path: str | os.PathLike) -> Path:
        """CSV (frame_path,subject_id,expression,method) plus ``<stem>.npy`` embeddings."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_path", "subject_id", "expression", "method"])
            for e in self.entries:
                w.writerow([e.ref, e.subject_id, e.expression, self.method])
        np.save(path.with_suffix(".npy"), np.stack([e.embedding for e in self.entries]) if self.entries
                else np.zeros((0, 0)))
        return path

    @classmethod
    def read(cls, path: str | os.PathLike, paths: list[str] | None = None) -> "PrototypeSet":
        """Load a set; ``paths`` (a split's frame paths) resolves path references to indices."""
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        side = path.with_suffix(".npy")
        emb = np.load(side) if side.exists() else np.zeros((len(rows), 0))
        lookup = {p: i for i, p in enumerate(paths or [])}
        entries = []
        for r, e in zip(rows, emb):
            ref = r["frame_path"]
            if ref.startswith("#"):
                idx = int(ref[1:])
            elif ref in lookup:
                idx = lookup[ref]
            else:
                raise KeyError(f"prototype frame {ref!r} not found in the source pool")
            entries.append(PrototypeEntry(idx, ref, int(r["subject_id"]), int(r["expression"]), e))
        method = rows[0]["method"] if rows else "unknown"
        return cls(entries, method)


# --------------------------------------------------------------------------- k-means


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def inertia(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _lloyd(x, centroids, max_iter, history):
    labels = None
    for _ in range(max_iter):
        new = _sqdist(x, centroids).argmin(1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centroids)):
            members = x[labels == j]
            if len(members):  # empty cluster keeps its centroid
                centroids[j] = members.mean(0)
        if history is not None:
            history.append(inertia(x, labels, centroids))
    return labels, centroids


def _farthest_point_init(x, k, first):
    chosen = [first]
    d = _sqdist(x, x[[first]])[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, _sqdist(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _hartigan(x, labels, centroids, history):
    """Single-point moves that lower inertia; escapes many Lloyd fixed points."""
    k = len(centroids)
    counts = np.bincount(labels, minlength=k).astype(float)
    moved = True
    while moved:
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((centroids - x[i]) ** 2).sum(1)
            gain_out = counts[a] / (counts[a] - 1) * d[a]
            cost_in = counts / (counts + 1) * d
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < gain_out - 1e-12:
                centroids[a] = (centroids[a] * counts[a] - x[i]) / (counts[a] - 1)
                centroids[b] = (centroids[b] * counts[b] + x[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
                if history is not None:
                    history.append(inertia(x, labels, centroids))
    return labels, centroids


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 8,
           history: list | None = None, exhaustive_limit: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from farthest-point seeds; returns (assignments, centroids).

    One start is the point nearest the data mean, the others are seeded random
    points. Small problems (at most ``exhaustive_limit`` ways to pick k points)
    additionally start from every k-subset of the points. Each run is polished
    with single-point Hartigan moves and the lowest-inertia run wins.
    ``history`` receives the per-iteration inertia of the winning run.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    first = int(np.argmin(((x - x.mean(0)) ** 2).sum(1)))
    inits = [_farthest_point_init(x, k, first)]
    inits += [_farthest_point_init(x, k, int(s)) for s in rng.integers(0, n, max(0, n_init - 1))]
    if math.comb(n, k) <= exhaustive_limit:
        inits += [x[list(c)].copy() for c in itertools.combinations(range(n), k)]
    best = None
    for init in inits:
        hist: list = []
        labels, cents = _lloyd(x, init, max_iter, hist)
        labels, cents = _hartigan(x, labels.copy(), cents, hist)
        labels, cents = _lloyd(x, cents, max_iter, hist)
        val = inertia(x, labels, cents)
        if best is None or val < best[0] - 1e-12:
            best = (val, labels, cents, hist)
    if history is not None:
        history.extend(best[3])
    return best[1], best[2]


def nearest_to_centroids(points, labels, centroids) -> list[int]:
    """Per cluster, the member closest to its centroid (lowest index on ties)."""
    x = np.asarray(points, dtype=np.float64)
    out = []
    for j, c in enumerate(centroids):
        members = np.flatnonzero(labels == j)
        if len(members) == 0:
            continue
        d = ((x[members] - c) ** 2).sum(1)
        # rounding can split exact ties (two-member clusters), so compare with a tolerance
        tied = d <= d.min() * (1 + 1e-9) + 1e-15
        out.append(int(members[np.flatnonzero(tied)[0]]))
    return out


# --------------------------------------------------------------------------- DBSCAN


def dbscan(points, eps: float, min_samples: int) -> np.ndarray:
    """Density clustering; -1 marks noise.

    Core points have at least ``min_samples`` neighbours within ``eps`` (self
    included). Border points join the cluster of their nearest core point.
    Cluster ids follow the first appearance when scanning points by index.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n == 0:
        return np.zeros(0, dtype=int)
    d = np.sqrt(_sqdist(x, x))
    adj = d <= eps
    core = adj.sum(1) >= min_samples
    labels = np.full(n, NOISE)
    nxt = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = nxt
        stack = [i]
        while stack:
            p = stack.pop()
            for q in np.flatnonzero(adj[p] & core):
                if labels[q] == NOISE:
                    labels[q] = nxt
                    stack.append(q)
        nxt += 1
    for i in np.flatnonzero(~core):
        cand = np.flatnonzero(adj[i] & core)
        if len(cand):
            labels[i] = labels[cand[np.argmin(d[i, cand])]]
    return canonical_labels(labels)


def canonical_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.full(len(labels), NOISE)
    mapping: dict[int, int] = {}
    for i, l in enumerate(labels):
        if l == NOISE:
            continue
        if l not in mapping:
            mapping[l] = len(mapping)
        out[i] = mapping[l]
    return out


def medoid(points, members) -> int:
    x = np.asarray(points, dtype=np.float64)[members]
    cost = np.sqrt(_sqdist(x, x)).sum(1)
    return int(np.asarray(members)[np.argmin(cost)])


def default_eps(points, neighbours: int = 4) -> float:
    """Median distance to the ``neighbours``-th nearest other point."""
    x = np.asarray(points, dtype=np.float64)
    if len(x) < 2:
        return 1.0
    d = np.sqrt(_sqdist(x, x))
    np.fill_diagonal(d, np.inf)
    kth = np.sort(d, axis=1)[:, min(neighbours, len(x) - 1) - 1]
    eps = float(np.median(kth))
    return eps if eps > 0 else 1e-6


# --------------------------------------------------------------------------- selection


@dataclass
class SourcePool:
    """Embeddings of candidate source frames with their labels."""

    embeddings: np.ndarray
    subject_ids: np.ndarray
    expressions: np.ndarray
    indices: np.ndarray | None = None
    refs: list[str] | None = None
    confidence: np.ndarray | None = None   # classifier probability of the true class
    correct: np.ndarray | None = None      # classifier prediction was right
    metadata: dict[int, dict] = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.embeddings) == 0:
            raise ValueError("need a non-empty n x d embedding matrix")
        n = len(self.embeddings)
        self.subject_ids = np.asarray(self.subject_ids, dtype=int)
        self.expressions = np.asarray(self.expressions, dtype=int)
        if len(self.subject_ids) != n or len(self.expressions) != n:
            raise ValueError("labels must match the embeddings")
        if self.indices is None:
            self.indices = np.arange(n)
        if self.refs is None:
            self.refs = [f"#{i}" for i in self.indices]

    def entry(self, row: int) -> PrototypeEntry:
        return PrototypeEntry(int(self.indices[row]), self.refs[row], int(self.subject_ids[row]),
                              int(self.expressions[row]), self.embeddings[row].copy())


def _per_subject(pool: SourcePool):
    for s in sorted(set(pool.subject_ids.tolist())):
        yield s, np.flatnonzero(pool.subject_ids == s)


def _db_clusters(x, rows, eps, min_samples):
    labels = dbscan(x[rows], eps, min_samples)
    return [rows[labels == c] for c in range(labels.max() + 1)] if len(labels) else []


def _fallback(pool, s, rows, why):
    logger.warning("subject %d: %s; using the subject medoid", s, why)
    return medoid(pool.embeddings, rows)


def select_prototypes(pool: SourcePool, method: str, params: ClusterParams | None = None, *,
                      target_embeddings=None, target_metadata: dict | None = None) -> PrototypeSet:
    """Choose real source frames as prototypes with one of the supported strategies."""
    method = method.lower()
    if method not in METHODS:
        raise ValueError(f"unknown prototype method {method!r}; expected one of {METHODS}")
    params = params or ClusterParams()
    x = pool.embeddings
    subjects = sorted(set(pool.subject_ids.tolist()))
    rows: list[int] = []
    used = dict(seed=params.seed)

    if method in ("db-all", "db-sub", "db-d", "db-cls"):
        eps = params.eps if params.eps is not None else default_eps(x)
        if params.eps is None:
            logger.info("dbscan eps heuristic (median 4-NN distance): %.5g, min_samples=%d", eps, params.min_samples)
        used.update(eps=eps, min_samples=params.min_samples)

    if method == "rnd":
        rng = np.random.default_rng(params.seed)
        rows = [int(rng.choice(r)) for _, r in _per_subject(pool)]
    elif method == "match":
        if not target_metadata or not pool.metadata:
            raise ValueError("match selection needs source and target subject metadata")
        keys = sorted(target_metadata)
        matched = [s for s in subjects
                   if all(pool.metadata.get(s, {}).get(k) == target_metadata[k] for k in keys)]
        if not matched:
            logger.warning("no source subject matches target metadata %s; falling back to random", target_metadata)
            matched = subjects
        rng = np.random.default_rng(params.seed)
        rows = [int(rng.choice(r)) for s, r in _per_subject(pool) if s in matched]
        used["matched_subjects"] = matched
    elif method == "top":
        if pool.confidence is None or pool.correct is None:
            raise ValueError("top selection needs classifier confidences")
        for s, r in _per_subject(pool):
            ok = r[pool.correct[r].astype(bool)]
            if len(ok) == 0:
                logger.warning("subject %d has no correctly classified frame; taking the most confident", s)
                ok = r
            conf = pool.confidence[ok]
            rows.append(int(ok[np.flatnonzero(conf == conf.max())[0]]))
    elif method == "km-all":
        k = params.k or len(subjects)
        labels, cents = kmeans(x, k, params.seed)
        rows = nearest_to_centroids(x, labels, cents)
        used["k"] = k
    elif method == "km-sub":
        for _, r in _per_subject(pool):
            labels, cents = kmeans(x[r], 1, params.seed)
            rows.append(int(r[nearest_to_centroids(x[r], labels, cents)[0]]))
    elif method == "db-all":
        for cl in _db_clusters(x, np.arange(len(x)), used["eps"], params.min_samples):
            rows.append(medoid(x, cl))
        if not rows:
            logger.warning("dbscan found no cluster over all subjects; using per-subject medoids")
            rows = [medoid(x, r) for _, r in _per_subject(pool)]
    else:
        target_c = None
        if method == "db-cls":
            if target_embeddings is None:
                raise ValueError("db-cls selection needs target neutral embeddings")
            target_c = np.asarray(target_embeddings, dtype=np.float64).mean(0)
        for s, r in _per_subject(pool):
            clusters = _db_clusters(x, r, used["eps"], params.min_samples)
            if not clusters:
                rows.append(_fallback(pool, s, r, "dbscan found no cluster"))
                continue
            if method == "db-sub":
                pick = max(clusters, key=len)  # first largest
            elif method == "db-d":
                pick = min(clusters, key=lambda c: _mean_pairwise(x[c]))
            else:
                dist = [float(((x[c].mean(0) - target_c) ** 2).sum()) for c in clusters]
                pick = clusters[int(np.argmin(dist))]
            rows.append(medoid(x, pick))
    return PrototypeSet([pool.entry(i) for i in rows], method, used)


def _mean_pairwise(pts) -> float:
    # density proxy for db-d; a singleton cluster is never the densest
    if len(pts) < 2:
        return float("inf")
    d = np.sqrt(_sqdist(pts, pts))
    return float(d.sum() / (len(pts) * (len(pts) - 1)))


def pool_from_model(model, split, non_neutral: bool = True) -> SourcePool:
    """Expression embeddings and classifier confidences of a split's frames."""
    import torch

    from .networks import embed_split

    sub = split.select(expressions=range(1, split.c_exp)) if non_neutral else split
    keep = np.flatnonzero(np.isin(split.expressions.numpy(), np.arange(1, split.c_exp))) if non_neutral \
        else np.arange(len(split))
    emb = embed_split(model, sub)
    with torch.no_grad():
        probs = model.classify_embedding(emb).softmax
    y = sub.expressions
    conf = probs[torch.arange(len(y)), y].numpy()
    correct = (probs.argmax(1) == y).numpy()
    return SourcePool(emb.numpy(), sub.subject_ids.numpy(), y.numpy(), keep,
                      [split.paths[i] for i in keep], conf, correct, split.metadata)
