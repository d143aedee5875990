"""Compiled CART regression tree growth and traversal.

A tree is stored as flat arrays indexed by node id: ``feature`` (-1 marks a
leaf), ``threshold``, ``left``, ``right``, ``value``, ``n_samples`` and
``gain`` (weighted squared-error reduction achieved by the node's split).
Samples with ``x <= threshold`` go left.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _best_split(X, y, idx, start, stop, features, min_leaf):
    # exhaustive search over midpoints of sorted unique values; strict
    # improvement keeps the lowest feature index, then the lowest threshold
    n = stop - start
    total = 0.0
    for i in range(start, stop):
        total += y[idx[i]]
    parent = total * total / n
    best_gain = 0.0
    best_f = -1
    best_t = 0.0
    vals = np.empty(n)
    ys = np.empty(n)
    for f in features:
        for i in range(n):
            vals[i] = X[idx[start + i], f]
        order = np.argsort(vals, kind="mergesort")
        for i in range(n):
            ys[i] = y[idx[start + order[i]]]
        left = 0.0
        for i in range(n - 1):
            left += ys[i]
            nl = i + 1
            if nl < min_leaf:
                continue
            if n - nl < min_leaf:
                break
            lo = vals[order[i]]
            hi = vals[order[i + 1]]
            if hi <= lo:
                continue
            right = total - left
            gain = left * left / nl + right * right / (n - nl) - parent
            if gain > best_gain * (1.0 + 1e-12) + 1e-12:
                best_gain = gain
                best_f = f
                best_t = lo + 0.5 * (hi - lo)
                if best_t >= hi:
                    best_t = lo
    return best_f, best_t, best_gain


@njit(cache=True, nogil=True)
def grow_tree(X, y, sample_idx, max_depth, min_leaf, n_sub, feature_keys):
    """Grow one tree on the rows ``sample_idx`` (repeats allowed).

    ``feature_keys[node]`` holds random keys; the ``n_sub`` features with the
    smallest keys are the split candidates at that node.
    """
    n_features = X.shape[1]
    cap = feature_keys.shape[0]
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    gain = np.zeros(cap)
    idx = sample_idx.copy()
    # stack of (node, start, stop, depth)
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = idx.shape[0]
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        stop = stack[top, 2]
        depth = stack[top, 3]
        n = stop - start
        s = 0.0
        lo = np.inf
        hi = -np.inf
        for i in range(start, stop):
            v = y[idx[i]]
            s += v
            lo = min(lo, v)
            hi = max(hi, v)
        value[node] = s / n
        count[node] = n
        if depth >= max_depth or n < 2 * min_leaf or hi - lo <= 0.0 or n_nodes + 2 > cap:
            continue
        if n_sub >= n_features:
            feats = np.arange(n_features)
        else:
            feats = np.sort(np.argsort(feature_keys[node], kind="mergesort")[:n_sub])
        f, t, g = _best_split(X, y, idx, start, stop, feats, min_leaf)
        if f < 0:
            continue
        # stable partition of idx[start:stop]
        buf = np.empty(n, np.int64)
        nl = 0
        for i in range(start, stop):
            if X[idx[i], f] <= t:
                buf[nl] = idx[i]
                nl += 1
        k = nl
        for i in range(start, stop):
            if X[idx[i], f] > t:
                buf[k] = idx[i]
                k += 1
        for i in range(n):
            idx[start + i] = buf[i]
        feature[node] = f
        threshold[node] = t
        gain[node] = g
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # push right first so the left subtree gets the lower node ids
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = start + nl
        stack[top, 2] = stop
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes
        stack[top, 1] = start
        stack[top, 2] = start + nl
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy(), gain[:n_nodes].copy())


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out
