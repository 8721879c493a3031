"""Builders shared by the test modules."""

import numpy as np

from mfmc.data import MDD, NC, FeatureTable
from mfmc.gbt import GbtModel, GbtParams, Tree


def make_table(values, labels=None, sites=None, names=None, ids=None):
    values = np.asarray(values, dtype=float)
    n, d = values.shape
    if labels is None:
        labels = [MDD if i % 2 == 0 else NC for i in range(n)]
    labels = [lab if isinstance(lab, str) else (MDD if lab else NC) for lab in labels]
    sites = sites if sites is not None else ["A"] * n
    names = names if names is not None else [f"F{j}" for j in range(d)]
    ids = ids if ids is not None else [f"s{i:03d}" for i in range(n)]
    return FeatureTable(ids, sites, labels, names, values)


def random_tree(rng, n_features, depth, n_rows=None):
    """Random tree with consistent integer covers.

    Covers are split at random, keeping every child at least 1 row.
    """
    n_rows = n_rows or int(rng.integers(2 ** depth, 200))
    rows = []

    def grow(cover, level):
        i = len(rows)
        rows.append(None)
        if level == depth or cover < 2 or (level > 0 and rng.random() < 0.25):
            rows[i] = (-1, 0.0, -1, -1, float(rng.normal()), float(cover))
            return i
        left_cover = int(rng.integers(1, cover))
        f = int(rng.integers(n_features))
        thr = float(rng.normal())
        lft = grow(left_cover, level + 1)
        rgt = grow(cover - left_cover, level + 1)
        rows[i] = (f, thr, lft, rgt, 0.0, float(cover))
        return i

    grow(n_rows, 0)
    return Tree.from_rows(rows)


def random_model(rng, n_features, depth, rounds):
    trees = tuple(random_tree(rng, n_features, depth) for _ in range(rounds))
    params = GbtParams(max_depth=max(depth, 1), rounds=rounds)
    return GbtModel(float(rng.normal()), trees, params, n_features)


def walk_margin(m, q):
    """Independent per-tree path walk using the nested JSON form."""
    total = m.base_score
    for t in m.trees:
        node = t.to_nested()
        while "leaf" not in node:
            node = node["left"] if q[node["feature"]] <= node["threshold"] else node["right"]
        total += node["leaf"]
    return total


def leaf_paths(tree):
    """Every (leaf value, [(feature, threshold, went_left, child/parent cover)]) path."""
    out = []

    def rec(node, path):
        if "leaf" in node:
            out.append((node["leaf"], path))
            return
        for side, went_left in (("left", True), ("right", False)):
            child = node[side]
            rec(child, path + [(node["feature"], node["threshold"], went_left,
                                child["cover"] / node["cover"])])

    rec(tree.to_nested(), [])
    return out


def enumerate_expectation(m, q, subset):
    """Conditional expectation by summing over leaves: a leaf contributes its
    value times the product of cover fractions on unknown-feature edges, and
    zero when a known-feature edge disagrees with the query."""
    s = set(subset)
    total = m.base_score
    for t in m.trees:
        for value, path in leaf_paths(t):
            w = 1.0
            for f, thr, went_left, frac in path:
                if f in s:
                    if (q[f] <= thr) != went_left:
                        w = 0.0
                        break
                else:
                    w *= frac
            total += w * value
    return total
