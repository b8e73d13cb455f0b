"""Least-squares regression trees stored as flat arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF = -1


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``x``."""
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]


def _best_split(x, r, min_leaf, features):
    """Best SSE-reducing split of residual vector ``r`` over ``features``.

    Returns ``(gain, feature, threshold)``; gain is 0 when no valid split.
    """
    n = r.shape[0]
    best = (0.0, LEAF, 0.0)
    if n < 2 * min_leaf:
        return best
    total = r.sum()
    base = total * total / n
    counts = np.arange(1, n)
    lo, hi = min_leaf - 1, n - min_leaf  # positions i split after sorted index i
    for j in features:
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        cs = np.cumsum(r[order])[:-1]
        gain = cs * cs / counts + (total - cs) ** 2 / (n - counts) - base
        valid = xs[:-1] < xs[1:]
        valid[:lo] = False
        valid[hi:] = False
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0] * (1 + 1e-12) + 1e-12:
            best = (float(gain[i]), int(j), 0.5 * (xs[i] + xs[i + 1]))
    return best


def fit_tree(x, target, max_depth=3, min_leaf=1, max_features=None, rng=None) -> Tree:
    """Grow a depth-limited regression tree on ``target`` (leaf = mean)."""
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    d = x.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(target[idx].mean()))
        return len(feature) - 1

    root = new_node(np.arange(x.shape[0]))
    stack = [(root, np.arange(x.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or idx.size < 2 * min_leaf:
            continue
        if max_features is not None and max_features < d:
            feats = np.sort(rng.choice(d, size=max_features, replace=False))
        else:
            feats = range(d)
        gain, j, thr = _best_split(x[idx], target[idx], min_leaf, feats)
        if j == LEAF or gain <= 0:
            continue
        mask = x[idx, j] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = j, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=float),
    )
