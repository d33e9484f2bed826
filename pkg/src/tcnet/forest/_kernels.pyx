# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# distutils: language = c++
"""Compiled Gini tree builder and predictor.

Mirrors ``_fallback.py`` operation for operation: class tallies are exact
integers, floating-point reductions run over classes in index order, and the
feature sampler is the same splitmix64 stream, so both paths emit identical
trees.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint64_t
from libcpp.algorithm cimport sort
from libcpp.pair cimport pair
from libcpp.vector cimport vector

cnp.import_array()


cdef inline uint64_t splitmix_next(uint64_t* state) noexcept nogil:
    state[0] += <uint64_t>0x9E3779B97F4A7C15
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


cdef inline double weighted_proxy(const int64_t* counts, const double* class_weight, int n_classes,
                                  double* total_out) noexcept nogil:
    """W * gini for one side of a split, with W the class-weighted mass."""
    cdef double total = 0.0
    cdef double s = 0.0
    cdef double p
    cdef int c
    for c in range(n_classes):
        total += <double>counts[c] * class_weight[c]
    total_out[0] = total
    if total <= 0.0:
        return 0.0
    for c in range(n_classes):
        p = (<double>counts[c] * class_weight[c]) / total
        s += p * p
    return total * (1.0 - s)


def build_tree(const double[:, ::1] X, const int32_t[::1] y, const int64_t[::1] sample_counts,
               const double[::1] class_weight, int n_classes, int max_depth, int max_features,
               uint64_t seed):
    """Grow one tree depth-first; returns (feature, threshold, left, right, value, importance)."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef uint64_t rng = seed

    # Node storage (grown dynamically).
    cdef vector[int32_t] feat, left, right, depth_of
    cdef vector[double] thr
    cdef vector[double] value
    cdef vector[vector[int32_t]] members
    cdef double[::1] importance = np.zeros(d)

    cdef vector[int32_t] root
    cdef Py_ssize_t i
    for i in range(n):
        if sample_counts[i] > 0:
            root.push_back(<int32_t>i)

    cdef vector[int32_t] stack
    cdef vector[int32_t] features
    features.resize(d)
    cdef vector[int64_t] node_counts, left_counts, right_counts
    node_counts.resize(n_classes)
    left_counts.resize(n_classes)
    right_counts.resize(n_classes)
    cdef vector[pair[double, int32_t]] order

    cdef int32_t node, best_feature, f, j, c, visited, n_members, n_classes_present
    cdef Py_ssize_t k, m, drawn
    cdef double parent_w, parent_proxy, best_proxy, best_thr, proxy, wl, wr, lo, hi, t
    cdef int64_t mass, cnt
    cdef int32_t idx
    cdef vector[int32_t] lhs, rhs

    feat.push_back(-1); left.push_back(-1); right.push_back(-1); thr.push_back(0.0); depth_of.push_back(0)
    for c in range(n_classes):
        value.push_back(0.0)
    members.push_back(root)
    stack.push_back(0)

    while stack.size() > 0:
        node = stack.back()
        stack.pop_back()
        n_members = <int32_t>members[node].size()
        for c in range(n_classes):
            node_counts[c] = 0
        mass = 0
        for k in range(n_members):
            idx = members[node][k]
            node_counts[y[idx]] += sample_counts[idx]
            mass += sample_counts[idx]
        parent_proxy = weighted_proxy(&node_counts[0], &class_weight[0], n_classes, &parent_w)
        for c in range(n_classes):
            value[node * n_classes + c] = (<double>node_counts[c] * class_weight[c]) / parent_w if parent_w > 0 else 0.0
        n_classes_present = 0
        for c in range(n_classes):
            if node_counts[c] > 0:
                n_classes_present += 1
        if depth_of[node] >= max_depth or mass < 2 or n_classes_present < 2:
            members[node].clear()
            continue

        for j in range(d):
            features[j] = j
        best_feature = -1
        best_proxy = parent_proxy
        best_thr = 0.0
        visited = 0
        drawn = 0
        while drawn < d and visited < max_features:
            j = <int32_t>(drawn + <Py_ssize_t>(splitmix_next(&rng) % <uint64_t>(d - drawn)))
            f = features[j]
            features[j] = features[drawn]
            features[drawn] = f
            drawn += 1
            lo = X[members[node][0], f]
            hi = lo
            for k in range(1, n_members):
                t = X[members[node][k], f]
                if t < lo:
                    lo = t
                if t > hi:
                    hi = t
            if not (hi > lo):
                continue
            visited += 1
            order.clear()
            for k in range(n_members):
                idx = members[node][k]
                order.push_back(pair[double, int32_t](X[idx, f], idx))
            sort(order.begin(), order.end())
            for c in range(n_classes):
                left_counts[c] = 0
            for k in range(n_members - 1):
                idx = order[k].second
                left_counts[y[idx]] += sample_counts[idx]
                if not (order[k].first < order[k + 1].first):
                    continue
                for c in range(n_classes):
                    right_counts[c] = node_counts[c] - left_counts[c]
                proxy = weighted_proxy(&left_counts[0], &class_weight[0], n_classes, &wl) + \
                    weighted_proxy(&right_counts[0], &class_weight[0], n_classes, &wr)
                if proxy < best_proxy:
                    best_proxy = proxy
                    best_feature = f
                    best_thr = 0.5 * order[k].first + 0.5 * order[k + 1].first
                    if not (best_thr < order[k + 1].first):
                        best_thr = order[k].first

        if best_feature < 0:
            members[node].clear()
            continue

        importance[best_feature] += parent_proxy - best_proxy
        lhs.clear()
        rhs.clear()
        for k in range(n_members):
            idx = members[node][k]
            if X[idx, best_feature] <= best_thr:
                lhs.push_back(idx)
            else:
                rhs.push_back(idx)
        members[node].clear()
        feat[node] = best_feature
        thr[node] = best_thr
        for m in range(2):
            feat.push_back(-1); left.push_back(-1); right.push_back(-1); thr.push_back(0.0)
            depth_of.push_back(depth_of[node] + 1)
            for c in range(n_classes):
                value.push_back(0.0)
        left[node] = <int32_t>(feat.size() - 2)
        right[node] = <int32_t>(feat.size() - 1)
        members.push_back(lhs)
        members.push_back(rhs)
        stack.push_back(right[node])
        stack.push_back(left[node])

    cdef Py_ssize_t n_nodes = feat.size()
    out_feat = np.empty(n_nodes, dtype=np.int32)
    out_thr = np.empty(n_nodes, dtype=np.float64)
    out_left = np.empty(n_nodes, dtype=np.int32)
    out_right = np.empty(n_nodes, dtype=np.int32)
    out_value = np.empty((n_nodes, n_classes), dtype=np.float64)
    cdef int32_t[::1] of = out_feat, ol = out_left, orr = out_right
    cdef double[::1] ot = out_thr
    cdef double[:, ::1] ov = out_value
    for k in range(n_nodes):
        of[k] = feat[k]
        ot[k] = thr[k]
        ol[k] = left[k]
        orr[k] = right[k]
        for c in range(n_classes):
            ov[k, c] = value[k * n_classes + c]
    return out_feat, out_thr, out_left, out_right, out_value, np.asarray(importance)


def predict_trees(const double[:, ::1] X, list trees, int n_classes):
    """Average leaf distributions over trees; trees are (feature, threshold, left, right, value)."""
    cdef Py_ssize_t n = X.shape[0]
    out = np.zeros((n, n_classes), dtype=np.float64)
    cdef double[:, ::1] acc = out
    cdef const int32_t[::1] feat
    cdef const double[::1] thr
    cdef const int32_t[::1] left, right
    cdef const double[:, ::1] value
    cdef Py_ssize_t i
    cdef int32_t node, c
    for tree in trees:
        feat, thr, left, right, value = tree[0], tree[1], tree[2], tree[3], tree[4]
        for i in range(n):
            node = 0
            while feat[node] >= 0:
                if X[i, feat[node]] <= thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            for c in range(n_classes):
                acc[i, c] += value[node, c]
    return out
