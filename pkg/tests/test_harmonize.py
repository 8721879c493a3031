import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_table
from mfmc import io
from mfmc.data import MDD, NC, load_feature_table
from mfmc.errors import ValidationError
from mfmc.harmonize import ComBatModel, combat_add_sites, combat_apply, combat_fit
from mfmc.synth import SynthConfig, generate, write_synth


def reference_combat(x, sites, pool="sites", tol=1e-6, max_iter=100):
    """Plain-loop parametric ComBat, one (site, feature) cell at a time.

    Location/scale model without covariates; pooled variance with n - #sites
    degrees of freedom; priors by method of moments, either per feature
    across sites (``pool="sites"``) or per site across features.
    Returns (gamma_star, delta2_star, grand_mean, pooled_std).
    """
    x = [list(map(float, row)) for row in x]
    n, p = len(x), len(x[0])
    levels = sorted(set(sites))
    members = {s: [i for i in range(n) if sites[i] == s] for s in levels}
    grand, pooled = [], []
    for j in range(p):
        col = [x[i][j] for i in range(n)]
        grand.append(sum(col) / n)
        ss = 0.0
        for s in levels:
            m = sum(col[i] for i in members[s]) / len(members[s])
            ss += sum((col[i] - m) ** 2 for i in members[s])
        pooled.append((ss / (n - len(levels))) ** 0.5)
    z = [[(x[i][j] - grand[j]) / pooled[j] for j in range(p)] for i in range(n)]

    def mean(v):
        return sum(v) / len(v)

    def var(v):
        m = mean(v)
        return sum((a - m) ** 2 for a in v) / (len(v) - 1)

    g_hat = {(s, j): mean([z[i][j] for i in members[s]]) for s in levels for j in range(p)}
    d_hat = {(s, j): var([z[i][j] for i in members[s]]) for s in levels for j in range(p)}

    def prior(s, j):
        if pool == "sites":
            cells = [(r, j) for r in levels]
        else:
            cells = [(s, k) for k in range(p)]
        gs = [g_hat[c] for c in cells]
        ds = [d_hat[c] for c in cells]
        mm, s2 = mean(ds), var(ds)
        return mean(gs), var(gs), (2 * s2 + mm ** 2) / s2, (mm * s2 + mm ** 3) / s2

    g_star = np.zeros((len(levels), p))
    d_star = np.zeros((len(levels), p))
    for si, s in enumerate(levels):
        rows = members[s]
        ns = len(rows)
        for j in range(p):
            gbar, t2, a, b = prior(s, j)
            g, d = g_hat[s, j], d_hat[s, j]
            for _ in range(max_iter):
                g_new = (ns * t2 * g_hat[s, j] + d * gbar) / (ns * t2 + d)
                ss = sum((z[i][j] - g_new) ** 2 for i in rows)
                d_new = (b + 0.5 * ss) / (ns / 2.0 + a - 1.0)
                done = max(abs(g_new - g), abs(d_new - d)) < tol
                g, d = g_new, d_new
                if done:
                    break
            g_star[si, j], d_star[si, j] = g, d
    return g_star, d_star, np.array(grand), np.array(pooled)


def site_mean_gaps(t, pooled_std):
    """Per-feature standardized site means, shape (sites, features)."""
    sites = np.array(t.site_ids)
    means = np.array([t.values[sites == s].mean(axis=0) for s in t.sites])
    return means / pooled_std


def planted_sites(rng, n_sites, n_per, d, shift):
    """Sites offset per feature by ``shift`` times a random ordering of
    0..n_sites-1, so any two sites differ by at least ``shift`` noise std."""
    offsets = np.array([rng.permutation(n_sites) for _ in range(d)]).T * shift
    x = np.vstack([rng.normal(size=(n_per, d)) + offsets[s] for s in range(n_sites)])
    sites = [f"S{s}" for s in range(n_sites) for _ in range(n_per)]
    labels = [MDD if i % 2 else NC for i in range(n_sites * n_per)]
    return make_table(x, labels=labels, sites=sites), offsets


def shifted_two_sites(rng, n=100, d=20, shift=1.0):
    x = rng.normal(size=(2 * n, d)) + rng.normal(size=d) * 3
    x[n:] += shift
    labels = [MDD if i % 2 else NC for i in range(2 * n)]
    return make_table(x, labels=labels, sites=["A"] * n + ["B"] * n)


# ---------------------------------------------------------------------------

def test_single_site_is_identity(rng):
    t = make_table(rng.normal(5, 2, size=(30, 8)))
    with pytest.warns(UserWarning, match="degenerate"):
        m = combat_fit(t)
    np.testing.assert_allclose(m.gamma_star, 0.0, atol=1e-12)
    np.testing.assert_allclose(m.delta_star, 1.0, atol=1e-12)
    np.testing.assert_allclose(combat_apply(m, t).values, t.values, atol=1e-8)


def test_two_site_shift_removed(rng):
    t = shifted_two_sites(rng)
    m = combat_fit(t)
    out = combat_apply(m, t)
    gaps = site_mean_gaps(out, m.pooled_std)
    assert np.max(np.abs(gaps[0] - gaps[1])) <= 0.05
    before = site_mean_gaps(t, m.pooled_std)
    assert np.mean(np.abs(before[0] - before[1])) > 0.9


@pytest.mark.parametrize("pool", ["sites", "features"])
def test_matches_reference_implementation_on_csv(tmp_path, pool):
    cfg = SynthConfig(seed=3, n_sites=3, subjects_per_site=(20, 30, 25), n_regions=4,
                      site_shift=1.0, site_scale=0.3)
    path = tmp_path / "ref.csv"
    write_synth(cfg, path)
    t = load_feature_table(path)
    m = combat_fit(t, prior_pooling=pool)
    g, d2, grand, pooled = reference_combat(t.values, t.site_ids, pool)
    np.testing.assert_allclose(m.grand_mean, grand, rtol=1e-12)
    np.testing.assert_allclose(m.pooled_std, pooled, rtol=1e-12)
    np.testing.assert_allclose(m.gamma_star, g, atol=1e-5)
    np.testing.assert_allclose(m.delta_star, np.sqrt(d2), atol=1e-5)
    # and the harmonized data
    idx = np.array([sorted(set(t.site_ids)).index(s) for s in t.site_ids])
    z = (t.values - grand) / pooled
    expect = pooled * (z - g[idx]) / np.sqrt(d2[idx]) + grand
    np.testing.assert_allclose(combat_apply(m, t).values, expect, atol=1e-4)


def test_apply_then_refit_has_no_site_effect():
    t, _ = generate(SynthConfig(seed=1, n_sites=3, n_regions=5, site_shift=1.0, site_scale=0.3))
    out = combat_apply(combat_fit(t), t)
    again = combat_fit(out)
    assert np.max(np.abs(again.gamma_hat)) < 0.05


def test_between_site_variance_reduced(rng):
    t, _ = planted_sites(rng, 4, 100, 40, 0.5)
    m = combat_fit(t)
    before = site_mean_gaps(t, m.pooled_std).var(axis=0)
    after = site_mean_gaps(combat_apply(m, t), m.pooled_std).var(axis=0)
    assert np.all(after <= 0.1 * before)


def test_preserves_metadata(rng):
    t = shifted_two_sites(rng, n=10, d=3)
    out = combat_apply(combat_fit(t), t)
    assert out.subject_ids == t.subject_ids
    assert out.site_ids == t.site_ids
    assert out.labels == t.labels
    assert out.feature_names == t.feature_names
    assert out.values.shape == t.values.shape


def test_unseen_site_rejected(rng):
    t = shifted_two_sites(rng, n=10, d=3)
    m = combat_fit(t)
    other = make_table(rng.normal(size=(2, 3)), sites=["C", "C"], ids=["x", "y"])
    with pytest.raises(ValidationError, match="C"):
        combat_apply(m, other)


def test_site_with_one_subject_rejected(rng):
    t = make_table(rng.normal(size=(5, 2)), sites=["A", "A", "A", "A", "B"])
    with pytest.raises(ValidationError, match=">= 2 subjects"):
        combat_fit(t)


def test_constant_feature_passes_through(rng):
    x = rng.normal(size=(20, 3))
    x[:, 1] = 4.0
    x[10:] += 1.0
    x[:, 1] = 4.0
    t = make_table(x, sites=["A"] * 10 + ["B"] * 10)
    with pytest.warns(UserWarning, match="zero-variance"):
        m = combat_fit(t)
    assert m.constant.tolist() == [False, True, False]
    assert np.all(m.gamma_star[:, 1] == 0.0) and np.all(m.delta_star[:, 1] == 1.0)
    np.testing.assert_array_equal(combat_apply(m, t).values[:, 1], x[:, 1])


def test_deterministic_and_serializable(rng):
    t = shifted_two_sites(rng, n=15, d=4)
    a, b = combat_fit(t), combat_fit(t)
    assert io.dumps(a.to_dict()) == io.dumps(b.to_dict())
    back = ComBatModel.from_dict(json.loads(io.dumps(a.to_dict())))
    np.testing.assert_array_equal(combat_apply(back, t).values, combat_apply(a, t).values)


def test_delta_star_positive():
    t, _ = generate(SynthConfig(seed=4, n_sites=3, n_regions=3, site_scale=0.5))
    m = combat_fit(t)
    assert np.all(m.delta_star > 0)
    assert 1 <= m.iterations <= 100


def test_no_eb_uses_raw_estimates(rng):
    t = shifted_two_sites(rng, n=12, d=5)
    m = combat_fit(t, eb=False)
    np.testing.assert_array_equal(m.gamma_star, m.gamma_hat)
    np.testing.assert_allclose(m.delta_star, m.delta_hat)


def test_prior_pooling_options():
    t, _ = generate(SynthConfig(seed=5, n_sites=5, n_regions=3, site_shift=1.0))
    assert len(combat_fit(t).gamma_bar) == t.n_features
    m = combat_fit(t, prior_pooling="features")
    assert len(m.gamma_bar) == len(t.sites)
    out = combat_apply(m, t)
    assert np.max(np.abs(combat_fit(out).gamma_hat)) < 0.05
    with pytest.raises(ValidationError):
        combat_fit(t, prior_pooling="subjects")


def test_preserve_labels_keeps_group_difference():
    t, truth = generate(SynthConfig(seed=6, n_sites=3, n_regions=3, effect=1.5,
                                    mdd_fraction=(0.2, 0.5, 0.8), site_shift=1.0))
    m = combat_fit(t, preserve_labels=True)
    out = combat_apply(m, t)
    lab = np.array(out.labels) == MDD
    j = truth.planted[0]
    diff = out.values[lab, j].mean() - out.values[~lab, j].mean()
    assert diff == pytest.approx(truth.effects[0], abs=0.3)


def test_add_sites_matches_separate_estimate():
    t, _ = generate(SynthConfig(seed=7, n_sites=4, n_regions=4, site_shift=1.0))
    held = np.array(t.site_ids) == "S04"
    train, test = t.take(np.nonzero(~held)[0]), t.take(np.nonzero(held)[0])
    m = combat_fit(train)
    with pytest.raises(ValidationError):
        combat_apply(m, test)
    m2 = combat_add_sites(m, test)
    assert m2.sites == m.sites + ("S04",)
    np.testing.assert_array_equal(m2.gamma_star[:3], m.gamma_star)
    # the new site's EB fixed point under the stored per-feature priors
    z = (test.values - m.grand_mean) / m.pooled_std
    n = z.shape[0]
    for j in range(t.n_features):
        gbar, t2, a, b = m.gamma_bar[j], m.tau2[j], m.a_prior[j], m.b_prior[j]
        g_hat, d = z[:, j].mean(), z[:, j].var(ddof=1)
        for _ in range(200):
            g = (n * t2 * g_hat + d * gbar) / (n * t2 + d)
            d = (b + 0.5 * ((z[:, j] - g) ** 2).sum()) / (n / 2 + a - 1)
        assert m2.gamma_star[3, j] == pytest.approx(g, abs=1e-5)
        assert m2.delta_star[3, j] == pytest.approx(np.sqrt(d), abs=1e-5)
    assert combat_add_sites(m2, test) is m2


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31), st.integers(min_value=2, max_value=5),
       st.floats(min_value=0.5, max_value=3.0))
def test_planted_shift_property(seed, n_sites, shift):
    t, offsets = planted_sites(np.random.default_rng(seed), n_sites, 60, 12, shift)
    m = combat_fit(t)
    before = offsets.var(axis=0)
    after = site_mean_gaps(combat_apply(m, t), m.pooled_std).var(axis=0)
    assert np.all(after <= 0.1 * before)
