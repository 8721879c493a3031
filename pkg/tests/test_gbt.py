import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_model, walk_margin
from mfmc import io
from mfmc.errors import ValidationError
from mfmc.gbt import (
    GbtModel, GbtParams, Tree, gbt_fit, gbt_predict_margin, gbt_predict_proba, log_loss, logit,
    sigmoid,
)


def brute_root_split(x, y, base, lam, gamma):
    """Best first-round root split by scanning every midpoint of every feature
    in plain Python; ties go to the lower feature, then the lower threshold."""
    p = 1 / (1 + math.exp(-base))
    g = [p - yi for yi in y]
    h = [p * (1 - p)] * len(y)
    G, H = sum(g), sum(h)
    best = (0.0, None, None)
    for j in range(x.shape[1]):
        vals = sorted(set(x[:, j]))
        for a, b in zip(vals, vals[1:]):
            thr = a + (b - a) / 2
            left = [i for i in range(len(y)) if x[i, j] <= thr]
            gl = sum(g[i] for i in left)
            hl = sum(h[i] for i in left)
            gain = 0.5 * (gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam)
                          - G ** 2 / (H + lam)) - gamma
            if gain > best[0] + 1e-12:
                best = (gain, j, thr)
    return best


def covers_consistent(tree):
    for i in range(tree.n_nodes):
        if tree.feature[i] >= 0:
            assert tree.cover[tree.left[i]] + tree.cover[tree.right[i]] == tree.cover[i]


def test_zero_rounds_balanced():
    x = np.arange(8.0)[:, None]
    m = gbt_fit(x, np.arange(8) % 2, GbtParams(rounds=0))
    assert m.base_score == 0.0
    np.testing.assert_array_equal(m.predict_margin(np.random.default_rng(0).normal(size=(5, 1))), 0.0)


def test_zero_rounds_three_quarters():
    y = np.array([1, 1, 1, 0] * 5)
    m = gbt_fit(np.zeros((20, 2)), y, GbtParams(rounds=0))
    assert m.base_score == pytest.approx(math.log(3), abs=1e-15)
    assert m.base_score == pytest.approx(1.0986, abs=1e-4)


def test_separable_one_dimension():
    x = np.linspace(-1, 1, 40)[:, None]
    y = (x[:, 0] > 0.1).astype(int)
    m = gbt_fit(x, y, GbtParams(max_depth=1, rounds=50, learning_rate=0.3))
    margin = m.predict_margin(x)
    assert np.all((margin > 0) == (y == 1))


def test_empty_model_is_sigmoid_of_base():
    m = GbtModel(0.7, (), GbtParams(), 3)
    assert gbt_predict_proba(m, np.zeros(3)) == pytest.approx(1 / (1 + math.exp(-0.7)))


def test_single_stump_path():
    stump = Tree.from_rows([(1, 0.5, 1, 2, 0.0, 10), (-1, 0, -1, -1, -0.25, 6),
                            (-1, 0, -1, -1, 0.75, 4)])
    m = GbtModel(0.1, (stump,), GbtParams(max_depth=1, rounds=1), 2)
    assert gbt_predict_margin(m, np.array([9.0, 0.5])) == pytest.approx(0.1 - 0.25)
    assert m.predict_margin(np.array([9.0, 0.6])) == pytest.approx(0.1 + 0.75)


def test_margin_matches_independent_walker(rng):
    for _ in range(10):
        m = random_model(rng, 6, 3, 5)
        q = rng.normal(size=(100, 6))
        got = m.predict_margin(q)
        expect = [walk_margin(m, row) for row in q]
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)


def test_root_split_matches_brute_force(rng):
    for trial in range(5):
        x = rng.integers(0, 6, size=(40, 4)).astype(float)
        y = (x[:, trial % 4] + rng.normal(size=40) > 2.5).astype(int)
        if y.min() == y.max():
            continue
        params = GbtParams(max_depth=1, rounds=1, learning_rate=0.5, reg_lambda=0.7)
        m = gbt_fit(x, y, params)
        gain, j, thr = brute_root_split(x, y, m.base_score, 0.7, 0.0)
        tree = m.trees[0]
        assert tree.feature[0] == j and tree.threshold[0] == thr
        # leaf values are -eta G / (H + lambda)
        p = sigmoid(m.base_score)
        for child in (tree.left[0], tree.right[0]):
            rows = (x[:, j] <= thr) if child == tree.left[0] else (x[:, j] > thr)
            G = np.sum(p - y[rows])
            H = np.sum(np.full(rows.sum(), p * (1 - p)))
            assert tree.value[child] == pytest.approx(-0.5 * G / (H + 0.7), rel=1e-12)


def test_tie_prefers_lower_feature():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    m = gbt_fit(x, np.array([0, 0, 1, 1]), GbtParams(max_depth=1, rounds=1))
    assert m.trees[0].feature[0] == 0
    assert m.trees[0].threshold[0] == 0.5


def test_gamma_blocks_all_splits():
    x = np.arange(10.0)[:, None]
    m = gbt_fit(x, np.arange(10) % 2, GbtParams(rounds=7, gamma=1e6))
    assert m.trees == () and m.skipped_rounds == 7


def test_min_child_count(rng):
    x = rng.normal(size=(60, 3))
    y = (x[:, 0] > 0).astype(int)
    m = gbt_fit(x, y, GbtParams(max_depth=4, rounds=10, min_child_count=8))
    for t in m.trees:
        leaves = t.feature < 0
        assert np.all(t.cover[leaves] >= 8)


def test_constant_inputs_give_prior_margin():
    x = np.ones((30, 2))
    y = np.array([1] * 10 + [0] * 20)
    m = gbt_fit(x, y, GbtParams(rounds=20))
    assert m.trees == ()
    np.testing.assert_allclose(m.predict_margin(x), logit(1 / 3))


@pytest.mark.parametrize("bad", [
    dict(max_depth=0), dict(rounds=-1), dict(learning_rate=0.0), dict(learning_rate=1.5),
    dict(reg_lambda=-1.0), dict(gamma=-0.1), dict(min_child_count=0),
])
def test_param_validation(bad):
    with pytest.raises(ValidationError):
        GbtParams(**bad)


def test_fit_validation(rng):
    with pytest.raises(ValidationError, match="both classes"):
        gbt_fit(rng.normal(size=(5, 2)), np.ones(5, dtype=int))
    with pytest.raises(ValidationError, match="0/1"):
        gbt_fit(rng.normal(size=(4, 2)), np.array([0, 1, 2, 1]))


def test_query_too_narrow(rng):
    x = rng.normal(size=(50, 4))
    y = (x[:, 3] > 0).astype(int)
    m = gbt_fit(x, y, GbtParams(rounds=3))
    with pytest.raises(ValidationError, match="trees use index 3"):
        m.predict_margin(np.zeros(3))


def test_serialization_round_trip_and_determinism(rng):
    x = rng.normal(size=(80, 5))
    y = (x[:, 0] + x[:, 1] ** 2 > 1).astype(int)
    a = gbt_fit(x, y, GbtParams(rounds=15))
    b = gbt_fit(x, y, GbtParams(rounds=15))
    assert io.dumps(a.to_dict()) == io.dumps(b.to_dict())
    back = GbtModel.from_dict(a.to_dict())
    np.testing.assert_array_equal(back.predict_margin(x), a.predict_margin(x))
    doc = a.to_dict()["params"]["trees"][0]
    assert {"feature", "threshold", "cover", "left", "right"} <= set(doc)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31), st.integers(min_value=1, max_value=4),
       st.floats(min_value=0.05, max_value=1.0), st.floats(min_value=0.0, max_value=5.0))
def test_fit_invariants(seed, depth, eta, lam):
    r = np.random.default_rng(seed)
    n, d = 60, 4
    x = r.normal(size=(n, d))
    y = (x[:, 0] - x[:, 1] + r.normal(size=n) > 0).astype(int)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    m = gbt_fit(x, y, GbtParams(max_depth=depth, rounds=12, learning_rate=eta, reg_lambda=lam))
    hist = np.array(m.loss_history)
    assert np.all(np.diff(hist) <= 1e-12)
    assert np.isclose(hist[-1], log_loss(y.astype(float), m.predict_margin(x)))
    assert len(m.trees) + m.skipped_rounds == 12
    for t in m.trees:
        covers_consistent(t)
        assert t.cover[0] == n
        assert t.depth <= depth
        assert np.all(np.isfinite(t.value))


def test_unused_features_do_not_matter(rng):
    x = rng.normal(size=(80, 6))
    y = (x[:, 2] > 0).astype(int)
    m = gbt_fit(x, y, GbtParams(rounds=10, max_depth=2))
    unused = sorted(set(range(6)) - m.used_features())
    assert unused
    q = rng.normal(size=(30, 6))
    q2 = q.copy()
    q2[:, unused] = rng.normal(size=(30, len(unused))) * 100
    np.testing.assert_array_equal(m.predict_margin(q), m.predict_margin(q2))


def test_sigmoid_stable():
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(0.0) == 0.5
