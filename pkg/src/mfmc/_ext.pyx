# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of ``_pykernels``; same signatures, same arithmetic order."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline double _midpoint(double a, double b) noexcept nogil:
    cdef double mid = 0.5 * (a + b)
    if not (a <= mid and mid < b):
        mid = a
    return mid


def midpoint(double a, double b):
    return _midpoint(a, b)


def find_splits(const double[:, ::1] xs, const cnp.int64_t[:, ::1] order,
                const cnp.int64_t[::1] slot, const double[::1] g, const double[::1] h,
                const double[::1] G, const double[::1] H, const cnp.int64_t[::1] count,
                double reg_lambda, double gamma, long min_child):
    cdef Py_ssize_t d = xs.shape[0]
    cdef Py_ssize_t n = xs.shape[1]
    cdef Py_ssize_t n_slots = G.shape[0]
    best_gain_a = np.zeros(n_slots)
    best_feat_a = np.full(n_slots, -1, dtype=np.int64)
    best_thr_a = np.zeros(n_slots)
    cdef double[::1] best_gain = best_gain_a
    cdef cnp.int64_t[::1] best_feat = best_feat_a
    cdef double[::1] best_thr = best_thr_a
    cdef double[::1] gl = np.zeros(n_slots)
    cdef double[::1] hl = np.zeros(n_slots)
    cdef cnp.int64_t[::1] nl = np.zeros(n_slots, dtype=np.int64)
    cdef double[::1] last = np.zeros(n_slots)
    cdef double[::1] parent = np.zeros(n_slots)
    cdef Py_ssize_t j, r, k, row
    cdef double v, gr, hr, gain, GL, HL
    cdef long m, nleft

    for k in range(n_slots):
        parent[k] = G[k] * G[k] / (H[k] + reg_lambda)

    with nogil:
        for j in range(d):
            for k in range(n_slots):
                gl[k] = 0.0
                hl[k] = 0.0
                nl[k] = 0
            for r in range(n):
                row = order[j, r]
                k = slot[row]
                if k < 0:
                    continue
                v = xs[j, r]
                nleft = nl[k]
                if nleft > 0 and v != last[k]:
                    m = count[k]
                    if nleft >= min_child and m - nleft >= min_child:
                        GL = gl[k]
                        HL = hl[k]
                        gr = G[k] - GL
                        hr = H[k] - HL
                        gain = 0.5 * (GL * GL / (HL + reg_lambda) + gr * gr / (hr + reg_lambda)
                                      - parent[k]) - gamma
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = j
                            best_thr[k] = _midpoint(last[k], v)
                gl[k] = gl[k] + g[row]
                hl[k] = hl[k] + h[row]
                nl[k] = nleft + 1
                last[k] = v
    return best_gain_a, best_feat_a, best_thr_a


# ---------------------------------------------------------------------------
# path-dependent tree SHAP

cdef struct PathElem:
    long feature
    double zero
    double one
    double pweight


cdef struct TreeView:
    const cnp.int64_t* feature
    const double* threshold
    const cnp.int64_t* left
    const cnp.int64_t* right
    const double* value
    const double* cover


cdef void _extend(PathElem* path, long depth, double zero, double one, long feature) noexcept nogil:
    cdef long i
    path[depth].feature = feature
    path[depth].zero = zero
    path[depth].one = one
    path[depth].pweight = 1.0 if depth == 0 else 0.0
    i = depth - 1
    while i >= 0:
        path[i + 1].pweight = path[i + 1].pweight + one * path[i].pweight * (i + 1) / <double>(depth + 1)
        path[i].pweight = zero * path[i].pweight * (depth - i) / <double>(depth + 1)
        i -= 1


cdef void _unwind(PathElem* path, long depth, long index) noexcept nogil:
    cdef double one = path[index].one
    cdef double zero = path[index].zero
    cdef double next_one = path[depth].pweight
    cdef double tmp
    cdef long i = depth - 1
    while i >= 0:
        if one != 0.0:
            tmp = path[i].pweight
            path[i].pweight = next_one * (depth + 1) / ((i + 1) * one)
            next_one = tmp - path[i].pweight * zero * (depth - i) / <double>(depth + 1)
        else:
            path[i].pweight = (path[i].pweight * (depth + 1)) / (zero * (depth - i))
        i -= 1
    for i in range(index, depth):
        path[i].feature = path[i + 1].feature
        path[i].zero = path[i + 1].zero
        path[i].one = path[i + 1].one


cdef double _unwound_sum(PathElem* path, long depth, long index) noexcept nogil:
    cdef double one = path[index].one
    cdef double zero = path[index].zero
    cdef double next_one = path[depth].pweight
    cdef double total = 0.0
    cdef double tmp
    cdef long i = depth - 1
    while i >= 0:
        if one != 0.0:
            tmp = next_one * (depth + 1) / ((i + 1) * one)
            total += tmp
            next_one = path[i].pweight - tmp * zero * ((depth - i) / <double>(depth + 1))
        else:
            total += (path[i].pweight / zero) / ((depth - i) / <double>(depth + 1))
        i -= 1
    return total


cdef void _recurse(TreeView* t, const double* x, double* phi, long node, PathElem* parent,
                   long depth, double zero, double one, long feature) noexcept nogil:
    cdef PathElem* path = parent + depth + 1
    cdef long i, k, f, hot, cold
    cdef double w, hot_zero, cold_zero, in_zero, in_one
    for i in range(depth + 1):
        path[i] = parent[i]
    _extend(path, depth, zero, one, feature)
    f = t.feature[node]
    if f < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(path, depth, i)
            phi[path[i].feature] += w * (path[i].one - path[i].zero) * t.value[node]
        return
    if x[f] <= t.threshold[node]:
        hot = t.left[node]
        cold = t.right[node]
    else:
        hot = t.right[node]
        cold = t.left[node]
    w = t.cover[node]
    hot_zero = t.cover[hot] / w
    cold_zero = t.cover[cold] / w
    in_zero = 1.0
    in_one = 1.0
    for k in range(depth + 1):
        if path[k].feature == f:
            in_zero = path[k].zero
            in_one = path[k].one
            _unwind(path, depth, k)
            depth -= 1
            break
    _recurse(t, x, phi, hot, path, depth + 1, hot_zero * in_zero, in_one, f)
    _recurse(t, x, phi, cold, path, depth + 1, cold_zero * in_zero, 0.0, f)


def tree_shap(const cnp.int64_t[::1] feature, const double[::1] threshold,
              const cnp.int64_t[::1] left, const cnp.int64_t[::1] right,
              const double[::1] value, const double[::1] cover, long max_depth,
              const double[:, ::1] X, double[:, ::1] phi):
    cdef TreeView t
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t m = X.shape[1]
    cdef Py_ssize_t r, j
    # path slices for depth 0..D+1, the root slot included
    cdef long size = (max_depth + 3) * (max_depth + 4) // 2
    cdef PathElem* buf
    cdef double* acc
    if feature.shape[0] == 0:
        return
    t.feature = &feature[0]
    t.threshold = &threshold[0]
    t.left = &left[0]
    t.right = &right[0]
    t.value = &value[0]
    t.cover = &cover[0]
    buf = <PathElem*> malloc(size * sizeof(PathElem))
    acc = <double*> malloc(m * sizeof(double))
    if buf == NULL or acc == NULL:
        free(buf)
        free(acc)
        raise MemoryError()
    try:
        with nogil:
            for r in range(n):
                for j in range(m):
                    acc[j] = 0.0
                _recurse(&t, &X[r, 0], acc, 0, buf, 0, 1.0, 1.0, -1)
                for j in range(m):
                    phi[r, j] = phi[r, j] + acc[j]
    finally:
        free(buf)
        free(acc)
