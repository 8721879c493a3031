import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_table
from mfmc.errors import ValidationError
from mfmc.splits import (
    Split, SplitPlan, leave_one_out, leave_site_out, make_plan, stratified_folds, stratified_kfold,
)


def table(n_mdd, n_nc, sites=None):
    labels = ["MDD"] * n_mdd + ["NC"] * n_nc
    return make_table(np.zeros((len(labels), 2)), labels=labels, sites=sites)


def test_ten_plus_ten_five_folds():
    t = table(10, 10)
    plan = stratified_kfold(t, 5, seed=3)
    assert len(plan) == 5
    for s in plan:
        lab = [t.labels[i] for i in s.test]
        assert lab.count("MDD") == 2 and lab.count("NC") == 2


def test_same_seed_same_plan():
    t = table(13, 9)
    a, b = stratified_kfold(t, 4, 7), stratified_kfold(t, 4, 7)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != stratified_kfold(t, 4, 8).to_dict()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 30), st.integers(0, 30), st.integers(0, 2 ** 31))
def test_kfold_partitions_and_balances(k, extra_mdd, extra_nc, seed):
    n_mdd, n_nc = k + extra_mdd, k + extra_nc
    t = table(n_mdd, n_nc)
    plan = stratified_kfold(t, k, seed)
    tests = np.concatenate([s.test for s in plan])
    assert sorted(tests.tolist()) == list(range(t.n_subjects))
    for s in plan:
        assert np.intersect1d(s.train, s.test).size == 0
        assert s.train.size + s.test.size == t.n_subjects
        mdd = sum(t.labels[i] == "MDD" for i in s.test)
        assert abs(mdd - n_mdd / k) < 1
        assert abs((s.test.size - mdd) - n_nc / k) < 1


def test_class_smaller_than_k():
    with pytest.raises(ValidationError, match="fewer than"):
        stratified_kfold(table(3, 10), 5)
    with pytest.raises(ValidationError, match=">= 2"):
        stratified_folds(np.array([0, 1]), 1, 0)


def test_leave_one_out():
    t = table(3, 2)
    plan = leave_one_out(t)
    assert len(plan) == 5
    assert [s.test.tolist() for s in plan] == [[i] for i in range(5)]
    assert all(s.train.size == 4 for s in plan)
    with pytest.raises(ValidationError):
        leave_one_out(table(1, 0))


def site_table():
    sites = ["A"] * 4 + ["B"] * 4 + ["C"] * 4
    return make_table(np.zeros((12, 1)), labels=["MDD", "NC"] * 6, sites=sites)


def test_leave_site_out_one_per_site():
    t = site_table()
    plan = leave_site_out(t)
    assert [s.name for s in plan] == ["A", "B", "C"]
    for s in plan:
        assert {t.site_ids[i] for i in s.test} == {s.name}
        assert s.name not in {t.site_ids[i] for i in s.train}
        assert s.test_sites == (s.name,)
    plan.check_site_disjoint(t)


def test_combined_sites_single_split():
    t = site_table()
    plan = leave_site_out(t, ["A", "C"], combined=True)
    assert len(plan) == 1 and plan.kind == "combined"
    assert sorted({t.site_ids[i] for i in plan.splits[0].test}) == ["A", "C"]
    assert plan.splits[0].test.size == 8


def test_site_errors():
    t = site_table()
    with pytest.raises(ValidationError, match="unknown site"):
        leave_site_out(t, ["Z"])
    with pytest.raises(ValidationError, match="no training"):
        leave_site_out(make_table(np.zeros((4, 1)), sites=["A"] * 4))
    single_class = make_table(np.zeros((4, 1)), labels=["MDD", "MDD", "NC", "MDD"],
                              sites=["A", "A", "B", "A"])
    with pytest.raises(ValidationError, match="single-class"):
        leave_site_out(single_class, ["B"])
    with pytest.raises(ValidationError):
        leave_site_out(t, [])


def test_leak_detection():
    t = site_table()
    leaky = SplitPlan("loso", (Split(np.array([0, 1, 4]), np.array([2, 3]), "A"),))
    with pytest.raises(ValidationError, match="leaks"):
        leaky.check_site_disjoint(t)
    with pytest.raises(ValidationError, match="overlap"):
        SplitPlan("kfold", (Split(np.array([0, 1]), np.array([1, 2])),))


def test_make_plan_dispatch():
    t = site_table()
    assert make_plan(t, "kfold", k=2).kind == "kfold"
    assert len(make_plan(t, "loo")) == 12
    assert len(make_plan(t, "loso")) == 3
    assert make_plan(t, "combined", sites=["B"]).kind == "combined"
    with pytest.raises(ValidationError):
        make_plan(t, "combined")
    with pytest.raises(ValidationError):
        make_plan(t, "bootstrap")
