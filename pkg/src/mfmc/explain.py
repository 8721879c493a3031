"""Shapley attributions for boosted tree ensembles.

Attributions are in margin (log-odds) units.  The value of a feature
coalition ``S`` is the path-dependent conditional expectation: at a split
on a feature in ``S`` follow the query's branch, otherwise average both
children weighted by their training cover.  :func:`exact_shapley`
enumerates all coalitions; :func:`tree_shap` gets the same numbers in
polynomial time.
"""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ValidationError
from .gbt import GbtModel, Tree

EXACT_MAX_FEATURES = 20
ADDITIVITY_TOL = 1e-8
OOF_PREFIX = "oof:"


@dataclass(frozen=True)
class ShapExplanation:
    """Additive attribution of one subject's margin.

    ``base_value + phi.sum()`` reproduces ``margin`` to within 1e-8.
    """

    subject_id: str
    base_value: float
    phi: np.ndarray = field(repr=False)
    feature_names: tuple[str, ...] = field(repr=False)
    margin: float = 0.0
    feature_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def reconstructed_margin(self) -> float:
        return float(self.base_value + math.fsum(self.phi))


@dataclass(frozen=True)
class FeatureRanking:
    """Features ordered by mean |phi|; ``excluded`` holds the mass of
    columns left out of the ranking (base-learner probabilities)."""

    entries: tuple[tuple[str, float, int], ...]
    excluded: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [e[0] for e in self.entries]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "feature", "mean_abs_shap"])
        for name, score, rank in self.entries:
            w.writerow([rank, name, f"{score:.9g}"])
        return buf.getvalue()


def _names(m: GbtModel, feature_names):
    if feature_names is None:
        return tuple(f"f{j}" for j in range(m.n_features))
    if len(feature_names) != m.n_features:
        raise ValidationError(f"{len(feature_names)} names for a {m.n_features}-feature model")
    return tuple(feature_names)


def _query(m: GbtModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.size != m.n_features:
        raise ValidationError(f"query must be a vector of length {m.n_features}")
    return q


# ---------------------------------------------------------------------------
# coalition values

def _tree_expectation(tree: Tree, q: np.ndarray, in_s) -> float:
    def rec(i):
        f = tree.feature[i]
        if f < 0:
            return tree.value[i]
        lft, rgt = tree.left[i], tree.right[i]
        if in_s(f):
            return rec(lft if q[f] <= tree.threshold[i] else rgt)
        return (tree.cover[lft] * rec(lft) + tree.cover[rgt] * rec(rgt)) / tree.cover[i]
    return float(rec(0))


def tree_conditional_expectation(m: GbtModel, q, subset) -> float:
    """Model margin with only the features in ``subset`` known."""
    q = _query(m, q)
    s = set(int(j) for j in subset)
    if any(j < 0 or j >= m.n_features for j in s):
        raise ValidationError("subset contains indices outside the feature range")
    total = m.base_score
    for tree in m.trees:
        total += _tree_expectation(tree, q, s.__contains__)
    return float(total)


def _coalition_values(m: GbtModel, q: np.ndarray) -> np.ndarray:
    """``f_x(S)`` for every bitmask ``S`` over the model's features."""
    n_feat = m.n_features
    masks = np.arange(1 << n_feat, dtype=np.int64)
    total = np.full(masks.size, m.base_score)

    def rec(tree, i):
        f = tree.feature[i]
        if f < 0:
            return np.full(masks.size, tree.value[i])
        lft, rgt = tree.left[i], tree.right[i]
        a, b = rec(tree, lft), rec(tree, rgt)
        known = ((masks >> f) & 1).astype(bool)
        followed = a if q[f] <= tree.threshold[i] else b
        averaged = (tree.cover[lft] * a + tree.cover[rgt] * b) / tree.cover[i]
        return np.where(known, followed, averaged)

    for tree in m.trees:
        total += rec(tree, 0)
    return total


def _shapley_weights(n_feat: int) -> np.ndarray:
    """``|S|! (M-|S|-1)! / M!`` indexed by coalition size."""
    return np.array([math.factorial(s) * math.factorial(n_feat - s - 1) / math.factorial(n_feat)
                     for s in range(n_feat)])


def exact_shapley(m: GbtModel, q, feature_names: Sequence[str] | None = None,
                  subject_id: str = "") -> ShapExplanation:
    """Shapley values by enumerating all ``2^M`` feature coalitions."""
    q = _query(m, q)
    n_feat = m.n_features
    if n_feat > EXACT_MAX_FEATURES:
        raise ValidationError(
            f"exact enumeration is limited to {EXACT_MAX_FEATURES} features "
            f"(model has {n_feat}); use tree_shap"
        )
    names = _names(m, feature_names)
    values = _coalition_values(m, q)
    masks = np.arange(values.size, dtype=np.int64)
    sizes = np.array([bin(s).count("1") for s in range(values.size)])
    weights = _shapley_weights(n_feat) if n_feat else np.zeros(0)
    phi = np.zeros(n_feat)
    for i in range(n_feat):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = math.fsum(weights[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return ShapExplanation(subject_id, float(values[0]), phi, names,
                           margin=float(m.predict_margin(q)), feature_values=q.copy())


# ---------------------------------------------------------------------------
# polynomial-time path algorithm

def expected_value(m: GbtModel) -> float:
    """Margin with no feature known: the cover-weighted mean leaf sum."""
    total = m.base_score
    for tree in m.trees:
        total += _tree_expectation(tree, np.zeros(0), lambda f: False)
    return float(total)


def shap_values(m: GbtModel, X, kernels=None) -> tuple[float, np.ndarray]:
    """Base value and ``(n, M)`` attribution matrix for the rows of ``X``."""
    kernels = kernels or _kernels
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != m.n_features:
        raise ValidationError(f"expected an (n, {m.n_features}) matrix")
    phi = np.zeros(X.shape)
    for tree in m.trees:
        kernels.tree_shap(tree.feature, tree.threshold, tree.left, tree.right, tree.value,
                          tree.cover, tree.depth, X, phi)
    return expected_value(m), phi


def tree_shap(m: GbtModel, q, feature_names: Sequence[str] | None = None,
              subject_id: str = "") -> ShapExplanation:
    q = _query(m, q)
    return explain_rows(m, q[None, :], feature_names, [subject_id])[0]


def explain_rows(m: GbtModel, X, feature_names=None, subject_ids=None,
                 kernels=None) -> list[ShapExplanation]:
    """:func:`tree_shap` for every row of ``X``, checking additivity."""
    names = _names(m, feature_names)
    X = np.asarray(X, dtype=float)
    if subject_ids is None:
        subject_ids = [str(i) for i in range(X.shape[0])]
    base, phi = shap_values(m, X, kernels)
    margins = m.predict_margin(X)
    out = []
    for i, sid in enumerate(subject_ids):
        e = ShapExplanation(str(sid), base, phi[i].copy(), names, float(margins[i]), X[i].copy())
        err = abs(e.reconstructed_margin - e.margin)
        if err > ADDITIVITY_TOL:
            raise RuntimeError(f"additivity violated for {sid!r}: |error| = {err:.3g}")
        out.append(e)
    return out


# ---------------------------------------------------------------------------
# summaries

def rank_features(explanations: Sequence[ShapExplanation], top_k: int | None = None,
                  exclude_prefix: str = OOF_PREFIX) -> FeatureRanking:
    """Rank features by mean |phi| over subjects, ties by name.

    Columns whose name starts with ``exclude_prefix`` are left out; their
    mean |phi| is reported in ``excluded``.
    """
    if not explanations:
        raise ValidationError("no explanations to rank")
    names = explanations[0].feature_names
    if any(e.feature_names != names for e in explanations):
        raise ValidationError("explanations have different feature layouts")
    mean_abs = np.abs(np.vstack([e.phi for e in explanations])).mean(axis=0)
    excluded = {n: float(v) for n, v in zip(names, mean_abs)
                if exclude_prefix and n.startswith(exclude_prefix)}
    kept = [(n, float(v)) for n, v in zip(names, mean_abs) if n not in excluded]
    kept.sort(key=lambda nv: (-nv[1], nv[0]))
    if top_k is not None:
        kept = kept[:top_k]
    return FeatureRanking(tuple((n, v, r + 1) for r, (n, v) in enumerate(kept)), excluded)


def force_record(e: ShapExplanation) -> dict:
    """Plot-ready breakdown of one explanation.

    The subject is called MDD iff the reconstructed margin is positive
    (probability above 0.5).
    """
    order = sorted(range(len(e.phi)), key=lambda j: (-abs(e.phi[j]), e.feature_names[j]))
    contributions = []
    for j in order:
        rec = {"feature": e.feature_names[j], "shap": float(e.phi[j])}
        if e.feature_values is not None:
            rec["value"] = float(e.feature_values[j])
        contributions.append(rec)
    total = e.reconstructed_margin
    return {
        "subject_id": e.subject_id,
        "base_value": float(e.base_value),
        "contributions": contributions,
        "reconstructed_margin": total,
        "probability": float(1.0 / (1.0 + math.exp(-total))) if total > -700 else 0.0,
        "decision": "MDD" if total > 0 else "NC",
    }


def explanations_csv(explanations: Sequence[ShapExplanation]) -> str:
    """``subject_id, base_value, <one column per feature>``, 9 significant digits."""
    if not explanations:
        raise ValidationError("no explanations to export")
    names = explanations[0].feature_names
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "base_value", *names])
    for e in explanations:
        w.writerow([e.subject_id, f"{e.base_value:.9g}", *(f"{v:.9g}" for v in e.phi)])
    return buf.getvalue()
