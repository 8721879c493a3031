"""Pure-numpy implementations of the hot loops.

Reference twin of ``_ext.pyx``.  Every floating point expression is
evaluated in the same order as the compiled version so both backends build
identical trees.
"""

from __future__ import annotations

import numpy as np


def midpoint(a: float, b: float) -> float:
    """Threshold between consecutive distinct sorted values ``a < b``."""
    mid = 0.5 * (a + b)
    if not (a <= mid < b):
        mid = a
    return mid


def find_splits(xs, order, slot, g, h, G, H, count, reg_lambda, gamma, min_child):
    """Best exact-greedy split for every active node.

    Parameters
    ----------
    xs : (d, n) float array
        Sorted values of every feature, ``xs[j, r] = x[order[j, r], j]``.
    order : (d, n) int array
        Row index of the r-th smallest value of feature ``j``.
    slot : (n,) int array
        Active node of every row, ``-1`` for rows in finished nodes.
    g, h : (n,) float arrays
        Gradients and hessians.
    G, H, count : (n_slots,) arrays
        Per-node gradient sum, hessian sum and row count.

    Returns
    -------
    gain, feature, threshold : arrays of length n_slots
        ``feature`` is -1 where no split has positive gain.  Ties go to
        the lower feature index, then the lower threshold.
    """
    n_slots = len(G)
    d = xs.shape[0]
    best_gain = np.zeros(n_slots)
    best_feat = np.full(n_slots, -1, dtype=np.int64)
    best_thr = np.zeros(n_slots)
    slot_sorted = slot[order]
    for k in range(n_slots):
        m = int(count[k])
        if m < 2:
            continue
        mask = slot_sorted == k
        sel = order[mask].reshape(d, m)
        v = xs[mask].reshape(d, m)
        gl = np.cumsum(g[sel], axis=1)[:, :-1]
        hl = np.cumsum(h[sel], axis=1)[:, :-1]
        nl = np.arange(1, m)
        gr = G[k] - gl
        hr = H[k] - hl
        parent = G[k] * G[k] / (H[k] + reg_lambda)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - parent) - gamma
        valid = (v[:, 1:] != v[:, :-1]) & (nl >= min_child) & (m - nl >= min_child)
        gain = np.where(valid, gain, -np.inf)
        flat = int(np.argmax(gain))
        j, i = divmod(flat, m - 1)
        if gain[j, i] > 0.0:
            best_gain[k] = gain[j, i]
            best_feat[k] = j
            best_thr[k] = midpoint(v[j, i], v[j, i + 1])
    return best_gain, best_feat, best_thr


# ---------------------------------------------------------------------------
# path-dependent tree SHAP

class _Path:
    __slots__ = ("feature", "zero", "one", "pweight")

    def __init__(self, n):
        self.feature = [0] * n
        self.zero = [0.0] * n
        self.one = [0.0] * n
        self.pweight = [0.0] * n

    def copy(self):
        p = _Path.__new__(_Path)
        p.feature = self.feature[:]
        p.zero = self.zero[:]
        p.one = self.one[:]
        p.pweight = self.pweight[:]
        return p


def _extend(path, depth, zero, one, feature):
    path.feature[depth] = feature
    path.zero[depth] = zero
    path.one[depth] = one
    path.pweight[depth] = 1.0 if depth == 0 else 0.0
    w = path.pweight
    for i in range(depth - 1, -1, -1):
        w[i + 1] += one * w[i] * (i + 1) / (depth + 1)
        w[i] = zero * w[i] * (depth - i) / (depth + 1)


def _unwind(path, depth, index):
    one = path.one[index]
    zero = path.zero[index]
    w = path.pweight
    next_one = w[depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = w[i]
            w[i] = next_one * (depth + 1) / ((i + 1) * one)
            next_one = tmp - w[i] * zero * (depth - i) / (depth + 1)
        else:
            w[i] = (w[i] * (depth + 1)) / (zero * (depth - i))
    for i in range(index, depth):
        path.feature[i] = path.feature[i + 1]
        path.zero[i] = path.zero[i + 1]
        path.one[i] = path.one[i + 1]


def _unwound_sum(path, depth, index):
    one = path.one[index]
    zero = path.zero[index]
    w = path.pweight
    next_one = w[depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = next_one * (depth + 1) / ((i + 1) * one)
            total += tmp
            next_one = w[i] - tmp * zero * ((depth - i) / (depth + 1))
        else:
            total += (w[i] / zero) / ((depth - i) / (depth + 1))
    return total


def _recurse(tree, x, phi, node, parent, depth, zero, one, feature):
    feat, thr, left, right, value, cover = tree
    path = parent.copy()
    _extend(path, depth, zero, one, feature)
    f = feat[node]
    if f < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(path, depth, i)
            phi[path.feature[i]] += w * (path.one[i] - path.zero[i]) * value[node]
        return
    if x[f] <= thr[node]:
        hot, cold = left[node], right[node]
    else:
        hot, cold = right[node], left[node]
    w = cover[node]
    hot_zero = cover[hot] / w
    cold_zero = cover[cold] / w
    in_zero = 1.0
    in_one = 1.0
    for k in range(depth + 1):
        if path.feature[k] == f:
            in_zero = path.zero[k]
            in_one = path.one[k]
            _unwind(path, depth, k)
            depth -= 1
            break
    _recurse(tree, x, phi, hot, path, depth + 1, hot_zero * in_zero, in_one, f)
    _recurse(tree, x, phi, cold, path, depth + 1, cold_zero * in_zero, 0.0, f)


def tree_shap(feature, threshold, left, right, value, cover, max_depth, X, phi):
    """Add one tree's path-dependent Shapley values for every row of ``X``.

    ``phi`` has shape ``(n_rows, n_features)`` and is updated in place.
    """
    tree = (feature.tolist(), threshold.tolist(), left.tolist(), right.tolist(),
            value.tolist(), cover.tolist())
    size = max_depth + 2
    for r in range(X.shape[0]):
        row = X[r].tolist()
        acc = [0.0] * X.shape[1]
        _recurse(tree, row, acc, 0, _Path(size), 0, 1.0, 1.0, -1)
        phi[r] += acc
