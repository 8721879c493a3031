"""Second-order gradient-boosted trees with binary logistic loss.

Each round fits a regression tree to the Newton step of the log-loss:
gradients ``g = p - y``, hessians ``h = p (1 - p)``, exact greedy splits
scored by

    gain = 0.5 * [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)] - gamma

and leaf values ``-eta * G / (H + lam)``.  There is no row or column
subsampling, so a fit is a deterministic function of its inputs.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels, io
from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GbtParams:
    max_depth: int = 3
    rounds: int = 100
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_count: int = 1

    def __post_init__(self):
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValidationError(f"max_depth must be an integer >= 1, got {self.max_depth}")
        if int(self.rounds) != self.rounds or self.rounds < 0:
            raise ValidationError(f"rounds must be an integer >= 0, got {self.rounds}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValidationError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if self.reg_lambda < 0:
            raise ValidationError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if int(self.min_child_count) != self.min_child_count or self.min_child_count < 1:
            raise ValidationError(f"min_child_count must be an integer >= 1, got {self.min_child_count}")


@dataclass(frozen=True)
class Tree:
    """Flat binary tree; node 0 is the root.

    Internal nodes send ``x[feature] <= threshold`` to ``left``.  Leaves
    have ``feature == -1`` and carry ``value`` (a margin contribution).
    ``cover`` is the number of training rows that reached the node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``x``."""
        idx = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[idx] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            node = idx[rows]
            go_left = x[rows, self.feature[node]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])
            active = self.feature[idx] >= 0
        return idx

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]

    def to_nested(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i]), "cover": int(self.cover[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "cover": int(self.cover[i]),
            "left": self.to_nested(int(self.left[i])),
            "right": self.to_nested(int(self.right[i])),
        }

    @classmethod
    def from_nested(cls, root: dict) -> Tree:
        rows = []

        def add(rec):
            i = len(rows)
            rows.append(None)
            if "leaf" in rec:
                rows[i] = (-1, 0.0, -1, -1, float(rec["leaf"]), float(rec["cover"]))
            else:
                left = add(rec["left"])
                right = add(rec["right"])
                rows[i] = (int(rec["feature"]), float(rec["threshold"]), left, right, 0.0,
                           float(rec["cover"]))
            return i

        add(root)
        return cls.from_rows(rows)

    @classmethod
    def from_rows(cls, rows) -> Tree:
        """Build from ``(feature, threshold, left, right, value, cover)`` tuples."""
        f, t, lft, rgt, v, c = zip(*rows)
        return cls(np.array(f, dtype=np.int64), np.array(t, dtype=float),
                   np.array(lft, dtype=np.int64), np.array(rgt, dtype=np.int64),
                   np.array(v, dtype=float), np.array(c, dtype=float))


@dataclass(frozen=True)
class GbtModel:
    base_score: float
    trees: tuple[Tree, ...]
    params: GbtParams
    n_features: int
    skipped_rounds: int = 0
    loss_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def learning_rate(self) -> float:
        return self.params.learning_rate

    def used_features(self) -> set[int]:
        return {int(f) for t in self.trees for f in t.feature if f >= 0}

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2:
            raise ValidationError("queries must be a vector or a matrix")
        need = max(self.used_features(), default=-1) + 1
        if x2.shape[1] < need:
            raise ValidationError(f"query has {x2.shape[1]} features; trees use index {need - 1}")
        return x2, single

    def predict_margin(self, x):
        x2, single = self._check(x)
        margin = np.full(x2.shape[0], self.base_score)
        for tree in self.trees:
            margin += tree.predict(x2)
        return float(margin[0]) if single else margin

    def predict_proba(self, x):
        m = self.predict_margin(x)
        return sigmoid(m)

    def to_dict(self) -> dict:
        return io.envelope("gbt", {
            "base_score": self.base_score,
            "params": asdict(self.params),
            "n_features": self.n_features,
            "skipped_rounds": self.skipped_rounds,
            "loss_history": list(self.loss_history),
            "trees": [t.to_nested() for t in self.trees],
        })

    @classmethod
    def from_dict(cls, doc: dict) -> GbtModel:
        p = io.unwrap(doc, "gbt")
        return cls(
            base_score=float(p["base_score"]),
            trees=tuple(Tree.from_nested(t) for t in p["trees"]),
            params=GbtParams(**p["params"]),
            n_features=int(p["n_features"]),
            skipped_rounds=int(p["skipped_rounds"]),
            loss_history=tuple(p["loss_history"]),
        )


def sigmoid(m):
    m = np.asarray(m, dtype=float)
    out = np.where(m >= 0, 1.0 / (1.0 + np.exp(-np.abs(m))),
                   np.exp(-np.abs(m)) / (1.0 + np.exp(-np.abs(m))))
    return float(out) if out.ndim == 0 else out


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def log_loss(y: np.ndarray, margin: np.ndarray) -> float:
    # log(1 + e^m) - y m, written to stay finite for large |m|
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


class _Presorted:
    """Column-wise sort of the training matrix, shared by every round."""

    def __init__(self, x: np.ndarray):
        # feature-major so each feature scan reads contiguous memory
        xt = np.ascontiguousarray(x.T)
        self.order = np.ascontiguousarray(np.argsort(xt, axis=1, kind="stable"), dtype=np.int64)
        self.xs = np.ascontiguousarray(np.take_along_axis(xt, self.order, axis=1))


def _grow_tree(x, pre: _Presorted, g, h, params: GbtParams, kernels) -> Tree:
    n = x.shape[0]
    # node records: [feature, threshold, left, right, value, cover, G, H]
    nodes = []
    node_of_row = np.zeros(n, dtype=np.int64)
    nodes.append([-1, 0.0, -1, -1, 0.0, n])
    frontier = [0]
    for _ in range(params.max_depth):
        if not frontier:
            break
        slot_of_node = np.full(len(nodes), -1, dtype=np.int64)
        slot_of_node[frontier] = np.arange(len(frontier))
        slot = slot_of_node[node_of_row]
        in_frontier = slot >= 0
        G = np.bincount(slot[in_frontier], weights=g[in_frontier], minlength=len(frontier))
        H = np.bincount(slot[in_frontier], weights=h[in_frontier], minlength=len(frontier))
        count = np.array([nodes[nid][5] for nid in frontier], dtype=np.int64)
        _, feat, thr = kernels.find_splits(pre.xs, pre.order, slot, g, h, G, H, count,
                                           float(params.reg_lambda), float(params.gamma),
                                           int(params.min_child_count))
        next_frontier = []
        for s, nid in enumerate(frontier):
            if feat[s] < 0:
                continue
            rows = np.nonzero(node_of_row == nid)[0]
            goes_left = x[rows, feat[s]] <= thr[s]
            left_id, right_id = len(nodes), len(nodes) + 1
            nodes.append([-1, 0.0, -1, -1, 0.0, int(goes_left.sum())])
            nodes.append([-1, 0.0, -1, -1, 0.0, int((~goes_left).sum())])
            nodes[nid][:4] = [int(feat[s]), float(thr[s]), left_id, right_id]
            node_of_row[rows[goes_left]] = left_id
            node_of_row[rows[~goes_left]] = right_id
            next_frontier += [left_id, right_id]
        frontier = next_frontier

    if len(nodes) == 1:
        return None
    leaves = [i for i, rec in enumerate(nodes) if rec[0] < 0]
    G = np.bincount(node_of_row, weights=g, minlength=len(nodes))
    H = np.bincount(node_of_row, weights=h, minlength=len(nodes))
    for i in leaves:
        nodes[i][4] = -params.learning_rate * G[i] / (H[i] + params.reg_lambda)
    return Tree.from_rows([tuple(rec) for rec in nodes])


def gbt_fit(x, y, params: GbtParams | None = None, kernels=None) -> GbtModel:
    """Fit a boosted ensemble on 0/1 labels.

    A round whose root has no positive-gain split adds no tree; since the
    gradients then stay unchanged, every later round would be skipped too,
    and training stops with those rounds counted in ``skipped_rounds``.
    """
    params = params or GbtParams()
    kernels = kernels or _kernels
    x = np.ascontiguousarray(x, dtype=float)
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValidationError("x must be (n, d) and y (n,)")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be 0/1")
    if not np.all(np.isfinite(x)):
        raise ValidationError("training matrix must be finite")
    y = y.astype(float)
    prior = y.mean()
    if prior in (0.0, 1.0):
        raise ValidationError("gradient boosting needs both classes")
    base = logit(prior)
    margin = np.full(x.shape[0], base)
    history = [log_loss(y, margin)]
    trees = []
    pre = _Presorted(x) if params.rounds else None
    for rnd in range(params.rounds):
        p = sigmoid(margin)
        g = np.ascontiguousarray(p - y)
        h = np.ascontiguousarray(p * (1.0 - p))
        tree = _grow_tree(x, pre, g, h, params, kernels)
        if tree is None:
            log.debug("round %d: no positive-gain split; stopping", rnd)
            break
        trees.append(tree)
        margin = margin + tree.predict(x)
        history.append(log_loss(y, margin))
    return GbtModel(base, tuple(trees), params, x.shape[1],
                    skipped_rounds=params.rounds - len(trees), loss_history=tuple(history))


def gbt_predict_margin(m: GbtModel, q):
    return m.predict_margin(q)


def gbt_predict_proba(m: GbtModel, q):
    return m.predict_proba(q)
