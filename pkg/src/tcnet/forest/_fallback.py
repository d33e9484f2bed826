"""Pure-numpy tree builder and predictor.

Same algorithm and floating-point operation order as the compiled kernels:
class tallies are exact integers, class reductions run in index order, and
feature draws come from the same splitmix64 stream.  Trees match bit for bit.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def weighted_proxy(counts: np.ndarray, class_weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """W * gini over the last axis of integer ``counts``; returns (proxy, W)."""
    weighted = counts.astype(np.float64) * class_weight
    total = np.zeros(counts.shape[:-1])
    for c in range(counts.shape[-1]):
        total = total + weighted[..., c]
    safe = np.where(total > 0.0, total, 1.0)
    s = np.zeros(counts.shape[:-1])
    for c in range(counts.shape[-1]):
        p = weighted[..., c] / safe
        s = s + p * p
    return np.where(total > 0.0, total * (1.0 - s), 0.0), total


def build_tree(X, y, sample_counts, class_weight, n_classes, max_depth, max_features, seed):
    """Grow one tree depth-first; returns (feature, threshold, left, right, value, importance)."""
    n, d = X.shape
    rng = SplitMix64(seed)
    importance = np.zeros(d)
    feat, thr, left, right, depth_of, value, members = [-1], [0.0], [-1], [-1], [0], [np.zeros(n_classes)], []
    members.append(np.flatnonzero(sample_counts > 0))
    stack = [0]
    while stack:
        node = stack.pop()
        idx = members[node]
        counts = np.zeros(n_classes, dtype=np.int64)
        np.add.at(counts, y[idx], sample_counts[idx])
        mass = int(sample_counts[idx].sum())
        parent_proxy, parent_w = weighted_proxy(counts, class_weight)
        parent_proxy, parent_w = float(parent_proxy), float(parent_w)
        if parent_w > 0:
            value[node] = (counts.astype(np.float64) * class_weight) / parent_w
        if depth_of[node] >= max_depth or mass < 2 or np.count_nonzero(counts) < 2:
            members[node] = None
            continue

        features = list(range(d))
        best_feature, best_proxy, best_thr = -1, parent_proxy, 0.0
        visited = drawn = 0
        tallies = np.zeros((len(idx), n_classes), dtype=np.int64)
        tallies[np.arange(len(idx)), y[idx]] = sample_counts[idx]
        while drawn < d and visited < max_features:
            j = drawn + rng.next() % (d - drawn)
            f = features[j]
            features[j] = features[drawn]
            features[drawn] = f
            drawn += 1
            vals = X[idx, f]
            if not (vals.max() > vals.min()):
                continue
            visited += 1
            order = np.argsort(vals, kind="stable")
            v = vals[order]
            cum = np.cumsum(tallies[order], axis=0)[:-1]
            valid = v[:-1] < v[1:]
            lp, _ = weighted_proxy(cum, class_weight)
            rp, _ = weighted_proxy(counts - cum, class_weight)
            proxy = np.where(valid, lp + rp, np.inf)
            k = int(np.argmin(proxy))
            if proxy[k] < best_proxy:
                best_proxy = float(proxy[k])
                best_feature = f
                best_thr = 0.5 * float(v[k]) + 0.5 * float(v[k + 1])
                if not (best_thr < v[k + 1]):
                    best_thr = float(v[k])

        if best_feature < 0:
            members[node] = None
            continue
        importance[best_feature] += parent_proxy - best_proxy
        go_left = X[idx, best_feature] <= best_thr
        members[node] = None
        feat[node], thr[node] = best_feature, best_thr
        for _ in range(2):
            feat.append(-1); thr.append(0.0); left.append(-1); right.append(-1)
            depth_of.append(depth_of[node] + 1)
            value.append(np.zeros(n_classes))
        left[node], right[node] = len(feat) - 2, len(feat) - 1
        members.append(idx[go_left])
        members.append(idx[~go_left])
        stack.append(right[node])
        stack.append(left[node])

    return (np.asarray(feat, dtype=np.int32), np.asarray(thr, dtype=np.float64),
            np.asarray(left, dtype=np.int32), np.asarray(right, dtype=np.int32),
            np.vstack(value).astype(np.float64), importance)


def predict_trees(X, trees, n_classes):
    """Average leaf distributions over trees; trees are (feature, threshold, left, right, value)."""
    n = X.shape[0]
    acc = np.zeros((n, n_classes))
    rows = np.arange(n)
    for feat, thr, left, right, value in trees:
        node = np.zeros(n, dtype=np.int64)
        active = feat[node] >= 0
        while active.any():
            r = rows[active]
            cur = node[r]
            go_left = X[r, feat[cur]] <= thr[cur]
            node[r] = np.where(go_left, left[cur], right[cur])
            active = feat[node] >= 0
        acc = acc + value[node]
    return acc
