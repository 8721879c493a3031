import json
import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import make_table
from mfmc import io
from mfmc.errors import ValidationError
from mfmc.gbt import GbtParams, gbt_fit, logit
from mfmc.stacking import (
    StackConfig, StackModel, check_no_leakage, config_from_grid, grid_search, single_fit, stack_fit,
    stack_predict_proba,
)
from mfmc.synth import SynthConfig, generate

FAST_META = GbtParams(max_depth=2, rounds=10)


class ConstantModel:
    def __init__(self, p):
        self.p = p

    def predict_proba(self, x):
        x = np.atleast_2d(x)
        return np.full(x.shape[0], self.p)


def small_synth(seed=0, n=40):
    t, _ = generate(SynthConfig(seed=seed, n_sites=2, subjects_per_site=n // 2, effect=1.5))
    return t


def two_blobs(rng, n=60, d=3, gap=3.0):
    y = np.arange(n) % 2
    x = rng.normal(size=(n, d))
    x[:, 0] += gap * (2 * y - 1)
    return make_table(x, labels=y)


def hand_stack(fold_outputs, y, passthrough=False):
    """Stack whose fold models return fixed constants."""
    k = len(fold_outputs)
    n = len(y)
    folds = np.arange(n) % k
    oof = np.array([[fold_outputs[f]] for f in folds])
    x = np.zeros((n, 1))
    meta_x = np.hstack([x, oof]) if passthrough else oof
    meta = gbt_fit(meta_x, y, FAST_META)
    cfg = StackConfig(inner_folds=k, qda_shrinkage=None, passthrough=passthrough, meta=FAST_META)
    base = {"knn": tuple(ConstantModel(p) for p in fold_outputs)}
    return StackModel(cfg, ("F0",), None, None, x, np.asarray(y), folds, base, oof, meta)


def test_meta_width_362():
    t = small_synth()
    m = stack_fit(t, StackConfig(meta=FAST_META))
    assert t.n_features == 360
    assert len(m.layout) == 362 and m.meta.n_features == 362
    assert m.layout[-2:] == ("oof:knn", "oof:qda")
    assert m.layout[:360] == t.feature_names
    assert all(len(m.base_models[name]) == 5 for name in ("knn", "qda"))
    assert m.predict_meta_matrix(t.values).shape == (40, 362)


def test_layout_without_passthrough_or_qda():
    m = stack_fit(small_synth(), StackConfig(passthrough=False, qda_shrinkage=None, meta=FAST_META))
    assert m.layout == ("oof:knn",)


def test_constant_base_outputs_degenerate():
    y = np.array([1, 0, 0, 1, 0, 0, 1, 0, 0, 0])
    m = hand_stack([0.5, 0.5], y)
    assert m.meta.trees == ()
    for q in ([0.0], [100.0], [-3.0]):
        assert m.meta.predict_margin(m.predict_meta_matrix(q)) == pytest.approx(logit(0.3))
    assert m.predict_proba(np.array([7.0])) == pytest.approx(0.3)


def test_fold_average_two_folds():
    m = hand_stack([0.2, 0.4], np.array([1, 0, 1, 0, 1, 0]))
    np.testing.assert_allclose(m.base_proba(np.zeros((3, 1))), 0.3)


def test_identical_fold_models_average_to_one(rng):
    t = two_blobs(rng)
    m = stack_fit(t, StackConfig(knn_k=3, meta=FAST_META))
    x = m.preprocess(t.values[:5])
    qda = m.base_models["qda"][0]
    clone = replace(m, base_models={"knn": m.base_models["knn"], "qda": (qda,) * 5})
    np.testing.assert_allclose(clone.base_proba(x)[:, 1], qda.predict_proba(x), rtol=1e-15, atol=0)


def test_no_leakage_and_tamper_detection(rng):
    t = two_blobs(rng)
    m = stack_fit(t, StackConfig(knn_k=3, meta=FAST_META))
    check_no_leakage(m)
    for f in range(5):
        held = np.nonzero(m.folds == f)[0]
        assert m.base_models["knn"][f].x.shape[0] == t.n_subjects - held.size
    bad = m.oof.copy()
    bad[0, 0] = 1.0 - bad[0, 0] + 0.01
    with pytest.raises(AssertionError, match="OOF"):
        check_no_leakage(replace(m, oof=bad))


def test_round_trip(rng):
    t = two_blobs(rng, d=4)
    m = stack_fit(t, StackConfig(knn_k=3, meta=FAST_META))
    doc = io.dumps(m.to_dict())
    back = StackModel.from_dict(json.loads(doc))
    assert back.layout == m.layout
    q = rng.normal(size=(10, 4))
    np.testing.assert_array_equal(back.predict_proba(q), m.predict_proba(q))
    assert io.dumps(back.to_dict()) == doc


def test_deterministic_fit(rng):
    t = two_blobs(rng)
    a = stack_fit(t, StackConfig(meta=FAST_META))
    b = stack_fit(t, StackConfig(meta=FAST_META))
    assert io.dumps(a.to_dict()) == io.dumps(b.to_dict())


def test_train_accuracy_at_least_oof(rng):
    t = small_synth(seed=3, n=80)
    m = stack_fit(t, StackConfig(meta=FAST_META))
    train_acc = np.mean((m.predict_table(t) > 0.5) == t.y)
    oof_acc = max(np.mean((m.oof[:, j] > 0.5) == t.y) for j in range(2))
    assert train_acc >= oof_acc


def test_perfect_base_learner_passes_through(rng):
    train, test = two_blobs(rng, n=60, gap=6.0), two_blobs(rng, n=40, gap=6.0)
    cfg = StackConfig(knn_k=1, qda_shrinkage=None, passthrough=False, meta=FAST_META)
    m = stack_fit(train, cfg)
    assert set(np.unique(m.oof)) == {0.0, 1.0}
    base = single_fit(train, "knn", {"k": 1})
    base_acc = np.mean((base.predict_proba(test.values) > 0.5) == test.y)
    stack_acc = np.mean((m.predict_table(test) > 0.5) == test.y)
    assert stack_acc == base_acc == 1.0


def test_dimension_mismatch(rng):
    m = stack_fit(two_blobs(rng), StackConfig(knn_k=3, meta=FAST_META))
    with pytest.raises(ValidationError, match="expected 3 features"):
        stack_predict_proba(m, np.zeros(2))


def test_small_class_error():
    t = make_table(np.arange(12.0)[:, None], labels=[1] * 3 + [0] * 9)
    with pytest.raises(ValidationError, match="inner folds"):
        stack_fit(t, StackConfig())


def test_config_validation():
    with pytest.raises(ValidationError):
        StackConfig(inner_folds=1)
    with pytest.raises(ValidationError):
        StackConfig(knn_k=None, qda_shrinkage=None)
    with pytest.raises(ValidationError, match="unknown"):
        StackConfig.from_dict({"folds": 3})
    cfg = StackConfig.from_dict({"meta": {"rounds": 7}})
    assert cfg.meta.rounds == 7


# ---------------------------------------------------------------------------
# grid search

def test_single_point_grid(rng):
    res = grid_search(two_blobs(rng), {"knn": [{"k": 7}]})
    assert res["knn"].best == {"k": 7}


def noisy_blobs(rng, n=300, flip=0.2):
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 2)) * 0.5
    x[:, 0] += 2 * (2 * y - 1)
    noisy = y.copy()
    flipped = rng.random(n) < flip
    noisy[flipped] = 1 - noisy[flipped]
    return make_table(x, labels=noisy)


def test_grid_prefers_smoothing_on_noisy_labels(rng):
    t = noisy_blobs(rng)
    res = grid_search(t, {"knn": [{"k": 1}, {"k": 3}]})
    scores = dict((p["k"], s) for p, s in res["knn"].scores)
    assert scores[3] > scores[1]
    assert res["knn"].best == {"k": 3}


def test_grid_tie_keeps_first(rng):
    t = two_blobs(rng, gap=8.0)
    res = grid_search(t, {"qda": [{"shrinkage": 0.5}, {"shrinkage": 0.2}]})
    (_, s1), (_, s2) = res["qda"].scores
    assert s1 == s2 == 1.0
    assert res["qda"].best == {"shrinkage": 0.5}


def test_degenerate_grid_point_scores_minus_inf(rng):
    res = grid_search(two_blobs(rng), {"knn": [{"k": 1000}, {"k": 3}]})
    assert res["knn"].scores[0][1] == -math.inf
    assert res["knn"].best == {"k": 3}
    assert res["knn"].to_dict()["scores"][0]["cv_accuracy"] is None


def test_empty_grid(rng):
    with pytest.raises(ValidationError, match="empty grid"):
        grid_search(two_blobs(rng), {"knn": []})


def test_config_from_grid(rng):
    res = grid_search(two_blobs(rng), {"knn": [{"k": 5}], "qda": [{"shrinkage": 0.3}],
                                      "gbt": [{"max_depth": 2, "rounds": 5, "learning_rate": 0.1}]})
    cfg = config_from_grid(StackConfig(), res)
    assert cfg.knn_k == 5 and cfg.qda_shrinkage == 0.3
    assert (cfg.meta.max_depth, cfg.meta.rounds, cfg.meta.learning_rate) == (2, 5, 0.1)
