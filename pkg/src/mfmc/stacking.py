"""Two-level stacked ensemble.

Level 0 holds the base classifiers (kNN, QDA).  Each is fitted K times on
a stratified K-fold partition of the training rows, and every row receives
the probability predicted by the one fold model that did not see it.
These out-of-fold (OOF) probabilities, optionally next to the original
features, form the training matrix of the level-1 boosted-tree model.
Unseen subjects get the average of the K fold models' probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import io
from .classifiers import knn_fit, qda_fit
from .data import FeatureTable, ZScoreParams, zscore_fit
from .errors import MFMCError, ValidationError
from .explain import OOF_PREFIX
from .gbt import GbtModel, GbtParams, gbt_fit
from .harmonize import ComBatModel, combat_apply
from .splits import stratified_folds

log = logging.getLogger(__name__)

BASE_LEARNERS = ("knn", "qda")
SINGLE_LEARNERS = ("knn", "qda", "gbt")

DEFAULT_GRIDS = {
    "knn": [{"k": k} for k in (3, 5, 7, 9, 11)],
    "qda": [{"shrinkage": s} for s in (1e-4, 1e-3, 1e-2, 1e-1, 1.0)],
    "gbt": [{"max_depth": d, "rounds": r, "learning_rate": eta}
            for d in (2, 3, 4) for r in (50, 100, 200) for eta in (0.1, 0.3)],
}


@dataclass(frozen=True)
class StackConfig:
    """Stacking hyper-parameters.

    ``knn_k`` or ``qda_shrinkage`` set to ``None`` drops that base learner.
    """

    inner_folds: int = 5
    knn_k: int | None = 5
    qda_shrinkage: float | None = 0.1
    meta: GbtParams = field(default_factory=GbtParams)
    passthrough: bool = True
    zscore: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.meta, dict):
            unknown = set(self.meta) - set(GbtParams.__dataclass_fields__)
            if unknown:
                raise ValidationError(f"unknown meta learner option(s): {sorted(unknown)}")
            object.__setattr__(self, "meta", GbtParams(**self.meta))
        if int(self.inner_folds) != self.inner_folds or self.inner_folds < 2:
            raise ValidationError(f"inner_folds must be an integer >= 2, got {self.inner_folds}")
        if not self.learners:
            raise ValidationError("at least one base learner is required")

    @property
    def learners(self) -> tuple[str, ...]:
        out = []
        if self.knn_k is not None:
            out.append("knn")
        if self.qda_shrinkage is not None:
            out.append("qda")
        return tuple(out)

    def learner_params(self, name: str) -> dict:
        if name == "knn":
            return {"k": int(self.knn_k)}
        if name == "qda":
            return {"shrinkage": float(self.qda_shrinkage)}
        if name == "gbt":
            return asdict(self.meta)
        raise ValidationError(f"unknown learner {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StackConfig:
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown stacking option(s): {sorted(unknown)}")
        return cls(**d)


def fit_learner(name: str, x, y, params: dict):
    """Fit one classifier by name; the result has ``predict_proba``."""
    if name == "knn":
        return knn_fit(x, y, **params)
    if name == "qda":
        return qda_fit(x, y, **params)
    if name == "gbt":
        return gbt_fit(x, y, GbtParams(**params))
    raise ValidationError(f"unknown learner {name!r}; expected one of {SINGLE_LEARNERS}")


@dataclass(frozen=True)
class StackModel:
    """Fitted stack.

    ``train_x`` is the preprocessed training matrix; fold model ``f`` of
    each base learner was fitted on the rows with ``folds != f``.
    """

    config: StackConfig
    feature_names: tuple[str, ...]
    zscore: ZScoreParams | None
    combat: ComBatModel | None
    train_x: np.ndarray = field(repr=False)
    train_y: np.ndarray = field(repr=False)
    folds: np.ndarray = field(repr=False)
    base_models: dict = field(repr=False)
    oof: np.ndarray = field(repr=False)
    meta: GbtModel = field(repr=False)

    def __post_init__(self):
        k = self.config.inner_folds
        for name in self.config.learners:
            if len(self.base_models.get(name, ())) != k:
                raise ValidationError(f"expected {k} fold models for {name}")
        if self.meta.n_features != len(self.layout):
            raise ValidationError("meta model width does not match the feature layout")

    @property
    def layout(self) -> tuple[str, ...]:
        """Meta input columns: original features (with passthrough), then
        one probability column per base learner."""
        head = self.feature_names if self.config.passthrough else ()
        return tuple(head) + tuple(OOF_PREFIX + n for n in self.config.learners)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def base_proba(self, x: np.ndarray) -> np.ndarray:
        """(n, #learners) fold-averaged base probabilities on preprocessed rows."""
        cols = []
        for name in self.config.learners:
            probs = [np.atleast_1d(m.predict_proba(x)) for m in self.base_models[name]]
            cols.append(np.mean(probs, axis=0))
        return np.column_stack(cols)

    def meta_input(self, x: np.ndarray, base: np.ndarray) -> np.ndarray:
        return np.hstack([x, base]) if self.config.passthrough else base

    def preprocess(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got {x.shape[-1]}")
        return self.zscore.transform(x) if self.zscore is not None else x

    def predict_meta_matrix(self, q) -> np.ndarray:
        """Meta-level input rows for raw (already harmonized) queries."""
        x = np.atleast_2d(self.preprocess(q))
        return self.meta_input(x, self.base_proba(x))

    def predict_proba(self, q):
        single = np.ndim(q) == 1
        p = self.meta.predict_proba(self.predict_meta_matrix(q))
        p = np.atleast_1d(p)
        return float(p[0]) if single else p

    def oof_meta_matrix(self) -> np.ndarray:
        """Meta training matrix as the level-1 model saw it."""
        return self.meta_input(self.train_x, self.oof)

    def prepare_table(self, t: FeatureTable) -> np.ndarray:
        """Harmonize (if a ComBat model is attached) and order columns."""
        if t.feature_names != self.feature_names:
            t = t.select(self.feature_names)
        if self.combat is not None:
            t = combat_apply(self.combat, t)
        return t.values

    def predict_table(self, t: FeatureTable) -> np.ndarray:
        return np.atleast_1d(self.predict_proba(self.prepare_table(t)))

    def to_dict(self) -> dict:
        base = {}
        for name in self.config.learners:
            base[name] = {"params": self.config.learner_params(name),
                          "train_rows": [np.nonzero(self.folds != f)[0].tolist()
                                         for f in range(self.config.inner_folds)]}
        return io.envelope("stack", {
            "config": self.config.to_dict(),
            "feature_names": list(self.feature_names),
            "layout": list(self.layout),
            "zscore": self.zscore.to_dict() if self.zscore is not None else None,
            "combat": self.combat.to_dict() if self.combat is not None else None,
            "train_x": self.train_x.tolist(),
            "train_y": self.train_y.tolist(),
            "folds": self.folds.tolist(),
            "base_models": base,
            "oof": self.oof.tolist(),
            "meta": self.meta.to_dict(),
        })

    @classmethod
    def from_dict(cls, doc: dict) -> StackModel:
        p = io.unwrap(doc, "stack")
        cfg = StackConfig.from_dict(p["config"])
        x = np.asarray(p["train_x"], dtype=float).reshape(len(p["train_y"]), -1)
        y = np.asarray(p["train_y"], dtype=np.int64)
        base = {}
        # fold models are refitted from their recorded rows; fits are deterministic
        for name, rec in p["base_models"].items():
            base[name] = tuple(fit_learner(name, x[rows], y[rows], rec["params"])
                               for rows in (np.asarray(r, dtype=np.int64) for r in rec["train_rows"]))
        m = cls(cfg, tuple(p["feature_names"]),
                ZScoreParams.from_dict(p["zscore"]) if p["zscore"] is not None else None,
                ComBatModel.from_dict(p["combat"]) if p["combat"] is not None else None,
                x, y, np.asarray(p["folds"], dtype=np.int64), base,
                np.asarray(p["oof"], dtype=float).reshape(len(y), -1),
                GbtModel.from_dict(p["meta"]))
        if list(m.layout) != p["layout"]:
            raise ValidationError("stored meta layout does not match the configuration")
        return m


def _fold_partition(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    try:
        return stratified_folds(y, k, seed)
    except ValidationError as exc:
        raise ValidationError(f"cannot build {k} inner folds with both classes: {exc}") from None


def check_no_leakage(m: StackModel) -> None:
    """Assert every OOF value came from a fold model that never saw its row."""
    k = m.config.inner_folds
    for f in range(k):
        held = np.nonzero(m.folds == f)[0]
        train = np.nonzero(m.folds != f)[0]
        if np.intersect1d(held, train).size:
            raise AssertionError(f"fold {f}: OOF rows overlap the fold model's training rows")
        for j, name in enumerate(m.config.learners):
            model = m.base_models[name][f]
            n_seen = model.x.shape[0] if hasattr(model, "x") else None
            if n_seen is not None and n_seen != train.size:
                raise AssertionError(f"fold {f}: {name} model trained on {n_seen} rows, "
                                     f"expected {train.size}")
            expect = np.atleast_1d(model.predict_proba(m.train_x[held]))
            if not np.array_equal(expect, m.oof[held, j]):
                raise AssertionError(f"fold {f}: stored {name} OOF column is not this fold's output")


def stack_fit(t: FeatureTable, cfg: StackConfig | None = None,
              combat: ComBatModel | None = None) -> StackModel:
    """Fit the stack on a labeled table.

    With ``combat``, the table is harmonized first and the model is kept
    for prediction.  Z-scoring (``cfg.zscore``) is fitted on these rows.
    """
    cfg = cfg or StackConfig()
    y = t.y
    if combat is not None:
        t = combat_apply(combat, t)
    zs = zscore_fit(t) if cfg.zscore else None
    x = zs.transform(t.values) if zs is not None else np.array(t.values)
    k = cfg.inner_folds
    folds = _fold_partition(y, k, cfg.seed)
    oof = np.full((t.n_subjects, len(cfg.learners)), np.nan)
    base = {}
    for j, name in enumerate(cfg.learners):
        params = cfg.learner_params(name)
        fold_models = []
        for f in range(k):
            train = folds != f
            model = fit_learner(name, x[train], y[train], params)
            oof[~train, j] = model.predict_proba(x[~train])
            fold_models.append(model)
        base[name] = tuple(fold_models)
    meta_x = np.hstack([x, oof]) if cfg.passthrough else oof
    meta = gbt_fit(meta_x, y, cfg.meta)
    m = StackModel(cfg, t.feature_names, zs, combat, x, y, folds, base, oof, meta)
    check_no_leakage(m)
    return m


def stack_predict_proba(m: StackModel, q):
    return m.predict_proba(q)


# ---------------------------------------------------------------------------
# single-learner pipelines and grid search

@dataclass(frozen=True)
class SingleModel:
    """One classifier on z-scored features, used for baselines and ablation."""

    learner: str
    params: dict
    zscore: ZScoreParams | None
    model: object = field(repr=False)

    def predict_proba(self, q):
        x = self.zscore.transform(q) if self.zscore is not None else np.asarray(q, dtype=float)
        return self.model.predict_proba(x)


def single_fit(t: FeatureTable, learner: str, params: dict, zscore: bool = True) -> SingleModel:
    zs = zscore_fit(t) if zscore else None
    x = zs.transform(t.values) if zs is not None else t.values
    return SingleModel(learner, dict(params), zs, fit_learner(learner, x, t.y, params))


def _scaler(names, x) -> ZScoreParams:
    std = x.std(axis=0)
    std[np.ptp(x, axis=0) == 0] = 0.0
    return ZScoreParams(names, x.mean(axis=0), std)


def _cv_accuracy(t: FeatureTable, folds, learner, params) -> float:
    x, y = t.values, t.y
    accs = []
    for f in range(int(folds.max()) + 1):
        tr, te = folds != f, folds == f
        zs = _scaler(t.feature_names, x[tr])
        model = fit_learner(learner, zs.transform(x[tr]), y[tr], params)
        pred = np.atleast_1d(model.predict_proba(zs.transform(x[te]))) > 0.5
        accs.append(float(np.mean(pred == y[te])))
    return float(np.mean(accs))


@dataclass(frozen=True)
class GridResult:
    learner: str
    best: dict
    scores: tuple[tuple[dict, float], ...]

    def to_dict(self) -> dict:
        return {"learner": self.learner, "best": self.best,
                "scores": [{"params": p, "cv_accuracy": s if np.isfinite(s) else None}
                           for p, s in self.scores]}


def grid_search(t: FeatureTable, grids: dict | None = None, folds: int = 5,
                seed: int = 0) -> dict:
    """Best parameters per learner by mean stratified-CV accuracy.

    Every learner uses the same seeded fold partition.  A grid point that
    cannot be fitted scores ``-inf``.  Ties keep the first declared point.
    """
    grids = DEFAULT_GRIDS if grids is None else grids
    fold = stratified_folds(t.y, folds, seed)
    out = {}
    for learner, points in grids.items():
        if not points:
            raise ValidationError(f"empty grid for {learner}")
        scores = []
        best, best_score = None, -np.inf
        for params in points:
            try:
                score = _cv_accuracy(t, fold, learner, params)
            except MFMCError as exc:
                log.info("grid point %s %s is degenerate: %s", learner, params, exc)
                score = -np.inf
            scores.append((dict(params), score))
            if best is None or score > best_score:
                best, best_score = dict(params), score
        out[learner] = GridResult(learner, best, tuple(scores))
    return out


def config_from_grid(cfg: StackConfig, results: dict) -> StackConfig:
    """Copy of ``cfg`` with the grid winners filled in."""
    changes = {}
    if "knn" in results and cfg.knn_k is not None:
        changes["knn_k"] = results["knn"].best["k"]
    if "qda" in results and cfg.qda_shrinkage is not None:
        changes["qda_shrinkage"] = results["qda"].best["shrinkage"]
    if "gbt" in results:
        changes["meta"] = replace(cfg.meta, **results["gbt"].best)
    return replace(cfg, **changes)

