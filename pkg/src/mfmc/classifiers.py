"""Base probabilistic classifiers: k-nearest neighbors and regularized QDA.

Both models predict ``p(MDD)`` (label 1) for binary 0/1 labels and share
the ``predict_proba(X) -> (n,)`` contract that stacking relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from . import io
from .errors import FitError, ValidationError


def _check_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if x.ndim != 2:
        raise ValidationError("x must be a 2-D matrix")
    if y.shape != (x.shape[0],):
        raise ValidationError(f"y has shape {y.shape}, expected ({x.shape[0]},)")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be 0 (NC) or 1 (MDD)")
    if not np.all(np.isfinite(x)):
        raise ValidationError("training rows must be finite")
    return x, y.astype(np.int64)


def _queries(q, d):
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q2 = q[None, :] if single else q
    if q2.ndim != 2 or q2.shape[1] != d:
        raise ValidationError(f"query dimension {q2.shape[-1]} does not match training dimension {d}")
    return q2, single


# ---------------------------------------------------------------------------
# kNN

@dataclass(frozen=True)
class KnnModel:
    """Stored training data for Euclidean k-nearest-neighbor voting."""

    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    k: int = 5

    def predict_proba(self, q) -> np.ndarray | float:
        """Fraction of MDD among the ``k`` nearest training rows.

        Neighbors are ranked by a stable sort on (distance, row index), so
        an exact tie at the k-th slot keeps the lower row index.
        """
        q2, single = _queries(q, self.x.shape[1])
        out = np.empty(q2.shape[0])
        for i, row in enumerate(q2):
            d2 = ((self.x - row) ** 2).sum(axis=1)
            nearest = np.argsort(d2, kind="stable")[: self.k]
            out[i] = self.y[nearest].sum() / self.k
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return io.envelope("knn", {"k": self.k, "x": self.x.tolist(), "y": self.y.tolist()})

    @classmethod
    def from_dict(cls, doc: dict) -> KnnModel:
        p = io.unwrap(doc, "knn")
        return cls(np.asarray(p["x"], dtype=float).reshape(len(p["y"]), -1),
                   np.asarray(p["y"], dtype=np.int64), int(p["k"]))


def knn_fit(x, y, k: int = 5) -> KnnModel:
    x, y = _check_xy(x, y)
    if int(k) != k or k < 1:
        raise ValidationError(f"k must be a positive integer, got {k!r}")
    if k > x.shape[0]:
        raise ValidationError(f"k={k} exceeds the {x.shape[0]} training rows")
    if np.unique(y).size < 2:
        raise ValidationError("kNN needs both classes in the training data")
    return KnnModel(x.copy(), y.copy(), int(k))


def knn_predict_proba(m: KnnModel, q) -> float | np.ndarray:
    return m.predict_proba(q)


# ---------------------------------------------------------------------------
# QDA

_PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class QdaModel:
    """Gaussian class-conditional model with shrunk per-class covariances.

    Arrays are indexed by class (0 = NC, 1 = MDD).  ``chol`` holds the lower
    Cholesky factor of each regularized covariance.
    """

    means: np.ndarray = field(repr=False)
    covariances: np.ndarray = field(repr=False)
    log_priors: np.ndarray = field(repr=False)
    shrinkage: float = 0.0
    chol: np.ndarray = field(default=None, repr=False)
    log_det: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.chol is None:
            chol, logdet = [], []
            for c, cov in enumerate(self.covariances):
                try:
                    L = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    L = None
                # rank-deficient matrices can factor with round-off pivots
                if L is None or np.min(np.diag(L)) ** 2 <= _PIVOT_TOL * max(np.max(np.diag(cov)), 1e-300):
                    raise FitError(
                        f"class {c} covariance is singular after shrinkage "
                        f"{self.shrinkage}; use a larger shrinkage"
                    )
                chol.append(L)
                logdet.append(2.0 * np.log(np.diag(L)).sum())
            object.__setattr__(self, "chol", np.array(chol))
            object.__setattr__(self, "log_det", np.array(logdet))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def scores(self, q) -> np.ndarray:
        """Per-class log posterior (up to a shared constant), shape (n, 2)."""
        q2, _ = _queries(q, self.dim)
        out = np.empty((q2.shape[0], 2))
        for c in range(2):
            diff = (q2 - self.means[c]).T
            sol = cho_solve((self.chol[c], True), diff)
            maha = np.einsum("ij,ij->j", diff, sol)
            out[:, c] = self.log_priors[c] - 0.5 * self.log_det[c] - 0.5 * maha
        return out

    def predict_proba(self, q) -> np.ndarray | float:
        single = np.ndim(q) == 1
        s = self.scores(q)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        p = e[:, 1] / e.sum(axis=1)
        return float(p[0]) if single else p

    def to_dict(self) -> dict:
        return io.envelope("qda", {
            "shrinkage": self.shrinkage,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_priors": self.log_priors.tolist(),
        })

    @classmethod
    def from_dict(cls, doc: dict) -> QdaModel:
        p = io.unwrap(doc, "qda")
        return cls(np.asarray(p["means"], dtype=float),
                   np.asarray(p["covariances"], dtype=float),
                   np.asarray(p["log_priors"], dtype=float),
                   float(p["shrinkage"]))


def shrunk_covariance(x: np.ndarray, shrinkage: float) -> np.ndarray:
    """``(1 - s) * S + s * trace(S)/d * I`` with ``S`` the n-1 sample covariance."""
    s = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    d = s.shape[0]
    return (1.0 - shrinkage) * s + shrinkage * (np.trace(s) / d) * np.eye(d)


def qda_fit(x, y, shrinkage: float = 0.0) -> QdaModel:
    x, y = _check_xy(x, y)
    if not 0.0 <= shrinkage <= 1.0:
        raise ValidationError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    means, covs, priors = [], [], []
    for c in (0, 1):
        xc = x[y == c]
        if xc.shape[0] < 2:
            raise ValidationError(f"QDA needs >= 2 rows per class; class {c} has {xc.shape[0]}")
        means.append(xc.mean(axis=0))
        covs.append(shrunk_covariance(xc, shrinkage))
        priors.append(xc.shape[0] / x.shape[0])
    return QdaModel(np.array(means), np.array(covs), np.log(priors), float(shrinkage))


def qda_predict_proba(m: QdaModel, q) -> float | np.ndarray:
    return m.predict_proba(q)
