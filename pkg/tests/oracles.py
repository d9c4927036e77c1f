"""Slow, loop-based reference implementations used as independent test oracles."""

import itertools
import math

import numpy as np


def ce_scalar(logits, labels):
    """Mean cross-entropy with explicit softmax and log, one sample at a time."""
    total = 0.0
    for row, y in zip(logits, labels):
        row = [float(v) for v in row]
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        p = math.exp(row[int(y)] - m) / z
        total += -math.log(p)
    return total / len(labels)


def l1_scalar(a, b):
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    s = 0.0
    for u, v in zip(a, b):
        s += abs(u - v)
    return s / len(a)


def mse_scalar(a, b):
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    s = 0.0
    for u, v in zip(a, b):
        s += (u - v) * (u - v)
    return s / len(a)


def best_partition(points, k):
    """Exhaustive minimum-inertia partition into k non-empty clusters."""
    x = np.asarray(points, dtype=float)
    n = len(x)
    best = (math.inf, None)
    for labels in itertools.product(range(k), repeat=n):
        if labels[0] != 0 or len(set(labels)) != k:
            continue
        lab = np.array(labels)
        val = 0.0
        for j in range(k):
            m = x[lab == j]
            val += ((m - m.mean(0)) ** 2).sum()
        if val < best[0] - 1e-12:
            best = (val, lab)
    return best


def nearest_to_centroid_brute(points, labels):
    x = np.asarray(points, dtype=float)
    out = set()
    for j in sorted(set(labels.tolist())):
        members = [i for i in range(len(x)) if labels[i] == j]
        c = x[members].mean(0)
        best_i, best_d = None, math.inf
        for i in members:
            d = sum((x[i, t] - c[t]) ** 2 for t in range(x.shape[1]))
            if d < best_d - 1e-15:
                best_i, best_d = i, d
        out.add(best_i)
    return out


def dbscan_reachability(points, eps, min_samples):
    """Naive density clustering: core graph components by transitive closure.

    Border points take the cluster of their nearest core neighbour; returns a
    partition as a set of frozensets (noise excluded) plus the noise set.
    """
    x = np.asarray(points, dtype=float)
    n = len(x)
    dist = [[math.sqrt(sum((x[i, t] - x[j, t]) ** 2 for t in range(x.shape[1]))) for j in range(n)]
            for i in range(n)]
    nb = [[dist[i][j] <= eps for j in range(n)] for i in range(n)]
    core = [sum(nb[i]) >= min_samples for i in range(n)]
    reach = [[core[i] and core[j] and nb[i][j] for j in range(n)] for i in range(n)]
    for i in range(n):
        reach[i][i] = core[i]
    for m in range(n):  # Warshall closure
        for i in range(n):
            if reach[i][m]:
                for j in range(n):
                    if reach[m][j]:
                        reach[i][j] = True
    comp = [-1] * n
    c = 0
    for i in range(n):
        if core[i] and comp[i] < 0:
            for j in range(n):
                if reach[i][j]:
                    comp[j] = c
            c += 1
    for i in range(n):
        if not core[i]:
            cands = [j for j in range(n) if core[j] and nb[i][j]]
            if cands:
                j = min(cands, key=lambda j: dist[i][j])
                comp[i] = comp[j]
    clusters = {}
    for i, l in enumerate(comp):
        if l >= 0:
            clusters.setdefault(l, set()).add(i)
    noise = {i for i, l in enumerate(comp) if l < 0}
    return {frozenset(s) for s in clusters.values()}, noise


def partition(labels):
    clusters = {}
    for i, l in enumerate(labels):
        if l >= 0:
            clusters.setdefault(int(l), set()).add(i)
    return {frozenset(s) for s in clusters.values()}, {i for i, l in enumerate(labels) if l < 0}


def central_diff(f, x, idx, h=1e-5):
    """Central finite difference of scalar f w.r.t. x.flat[idx] (x mutated and restored)."""
    flat = x.view(-1)
    old = flat[idx].item()
    flat[idx] = old + h
    fp = float(f())
    flat[idx] = old - h
    fm = float(f())
    flat[idx] = old
    return (fp - fm) / (2 * h)
