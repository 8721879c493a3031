"""Train/test split plans: stratified k-fold, leave-one-out, leave-site-out."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import FeatureTable
from .errors import ValidationError

KFOLD = "kfold"
LOO = "loo"
LOSO = "loso"
COMBINED = "combined"
PLAN_KINDS = (KFOLD, LOO, LOSO, COMBINED)


@dataclass(frozen=True)
class Split:
    train: np.ndarray = field(repr=False)
    test: np.ndarray = field(repr=False)
    name: str = ""
    test_sites: tuple[str, ...] = ()


@dataclass(frozen=True)
class SplitPlan:
    kind: str
    splits: tuple[Split, ...]
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValidationError(f"unknown plan kind {self.kind!r}; expected one of {PLAN_KINDS}")
        for s in self.splits:
            if np.intersect1d(s.train, s.test).size:
                raise ValidationError(f"split {s.name!r}: train and test overlap")

    def __len__(self):
        return len(self.splits)

    def __iter__(self):
        return iter(self.splits)

    def check_site_disjoint(self, t: FeatureTable) -> None:
        """Raise unless every split keeps test sites out of training."""
        for s in self.splits:
            train_sites = {t.site_ids[i] for i in s.train}
            test_sites = {t.site_ids[i] for i in s.test}
            shared = train_sites & test_sites
            if shared:
                raise ValidationError(f"split {s.name!r} leaks site(s) {sorted(shared)} into training")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "splits": [{"name": s.name, "train": s.train.tolist(), "test": s.test.tolist(),
                        "test_sites": list(s.test_sites)} for s in self.splits],
        }


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold number of every row.

    Each class is shuffled with its own seeded stream and dealt round-robin,
    so fold class counts differ by at most one.
    """
    y = np.asarray(y)
    if int(k) != k or k < 2:
        raise ValidationError(f"number of folds must be an integer >= 2, got {k}")
    fold = np.empty(y.size, dtype=np.int64)
    rng = np.random.default_rng(seed)
    offset = 0
    for cls in np.unique(y):
        rows = np.nonzero(y == cls)[0]
        if rows.size < k:
            raise ValidationError(
                f"class {cls} has {rows.size} subject(s), fewer than the {k} folds; "
                "use fewer folds or more data"
            )
        rows = rows[rng.permutation(rows.size)]
        # continue the deal where the previous class stopped to balance fold sizes
        fold[rows] = (np.arange(rows.size) + offset) % k
        offset = (offset + rows.size) % k
    return fold


def stratified_kfold(t: FeatureTable, k: int = 5, seed: int = 0) -> SplitPlan:
    fold = stratified_folds(t.y, k, seed)
    idx = np.arange(t.n_subjects)
    splits = tuple(Split(idx[fold != f], idx[fold == f], f"fold{f + 1}") for f in range(k))
    return SplitPlan(KFOLD, splits, seed)


def leave_one_out(t: FeatureTable) -> SplitPlan:
    n = t.n_subjects
    if n < 2:
        raise ValidationError("leave-one-out needs at least 2 subjects")
    idx = np.arange(n)
    splits = tuple(Split(np.delete(idx, i), idx[i:i + 1], t.subject_ids[i]) for i in range(n))
    return SplitPlan(LOO, splits)


def _site_split(t: FeatureTable, held: Sequence[str], name: str) -> Split:
    site = np.array(t.site_ids)
    test_mask = np.isin(site, list(held))
    train, test = np.nonzero(~test_mask)[0], np.nonzero(test_mask)[0]
    if train.size == 0:
        raise ValidationError(f"holding out {name!r} leaves no training subjects")
    labels = {t.labels[i] for i in train}
    if len(labels) < 2:
        raise ValidationError(f"holding out {name!r} leaves a single-class training set")
    return Split(train, test, name, tuple(held))


def leave_site_out(t: FeatureTable, sites: Sequence[str] | None = None,
                   combined: bool = False) -> SplitPlan:
    """One split per held-out site, or a single split holding out all of
    ``sites`` together when ``combined`` is set.  ``None`` means every site."""
    known = t.sites
    sites = list(known if sites is None else sites)
    if not sites:
        raise ValidationError("no sites requested")
    unknown = [s for s in sites if s not in known]
    if unknown:
        raise ValidationError(f"unknown site(s) {unknown}; table has {known}")
    if combined:
        splits = (_site_split(t, sites, "+".join(sites)),)
    else:
        splits = tuple(_site_split(t, [s], s) for s in sites)
    plan = SplitPlan(COMBINED if combined else LOSO, splits)
    plan.check_site_disjoint(t)
    return plan


def make_plan(t: FeatureTable, kind: str, k: int = 5, seed: int = 0,
              sites: Sequence[str] | None = None) -> SplitPlan:
    if kind == KFOLD:
        return stratified_kfold(t, k, seed)
    if kind == LOO:
        return leave_one_out(t)
    if kind == LOSO:
        return leave_site_out(t, sites)
    if kind == COMBINED:
        if not sites:
            raise ValidationError("a combined-site plan needs an explicit site list")
        return leave_site_out(t, sites, combined=True)
    raise ValidationError(f"unknown plan kind {kind!r}; expected one of {PLAN_KINDS}")
