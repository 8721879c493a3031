"""Parametric empirical-Bayes ComBat harmonization of site effects.

Model per site ``i``, feature ``j`` and subject ``k``::

    x_ijk = alpha_j + sigma_j * (gamma_ij + delta_ij * e_ijk)

Data are standardized with the grand mean ``alpha_j`` and the pooled
within-site standard deviation ``sigma_j``; site location ``gamma`` and
scale ``delta`` are estimated per site and shrunk toward a normal /
inverse-gamma prior whose hyperparameters come from method-of-moments.
By default each feature gets its own prior, pooled over the sites
(``prior_pooling="sites"``); ``"features"`` instead gives each site one
prior pooled over all of its features.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import io
from .data import MDD, UNKNOWN, FeatureTable
from .errors import ValidationError

log = logging.getLogger(__name__)

CONV_TOL = 1e-6
MAX_ITER = 100
# relative size below which a moment is treated as zero
_DEGENERATE = 1e-12


@dataclass(frozen=True)
class ComBatModel:
    """Fitted harmonization parameters.

    ``gamma_star`` and ``delta_star`` have shape ``(n_sites, n_features)``;
    ``delta_star`` is a scale (standard deviation ratio), so harmonized
    values are ``sigma * (z - gamma_star) / delta_star + alpha``.
    Prior hyperparameters are ``None`` wherever the moments were degenerate
    and the raw estimates were used instead.
    """

    feature_names: tuple[str, ...]
    sites: tuple[str, ...]
    site_counts: tuple[int, ...]
    grand_mean: np.ndarray = field(repr=False)
    pooled_std: np.ndarray = field(repr=False)
    gamma_hat: np.ndarray = field(repr=False)
    delta_hat: np.ndarray = field(repr=False)
    gamma_star: np.ndarray = field(repr=False)
    delta_star: np.ndarray = field(repr=False)
    gamma_bar: list = field(repr=False)
    tau2: list = field(repr=False)
    a_prior: list = field(repr=False)
    b_prior: list = field(repr=False)
    constant: np.ndarray = field(repr=False)
    iterations: int = 0
    prior_pooling: str = "sites"
    preserve_labels: bool = False
    label_effect: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if np.any(~(self.delta_star > 0)):
            raise ValidationError("ComBat scale parameters must be positive")
        if len(self.sites) != self.gamma_star.shape[0]:
            raise ValidationError("one row of parameters per site required")

    def site_index(self, site: str) -> int:
        try:
            return self.sites.index(site)
        except ValueError:
            raise ValidationError(f"site {site!r} was not seen when fitting ComBat") from None

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return io.envelope("combat", {
            "feature_names": list(self.feature_names),
            "sites": list(self.sites),
            "site_counts": list(self.site_counts),
            "grand_mean": arr(self.grand_mean),
            "pooled_std": arr(self.pooled_std),
            "gamma_hat": arr(self.gamma_hat),
            "delta_hat": arr(self.delta_hat),
            "gamma_star": arr(self.gamma_star),
            "delta_star": arr(self.delta_star),
            "gamma_bar": self.gamma_bar,
            "tau2": self.tau2,
            "a_prior": self.a_prior,
            "b_prior": self.b_prior,
            "constant": arr(self.constant),
            "iterations": self.iterations,
            "prior_pooling": self.prior_pooling,
            "preserve_labels": self.preserve_labels,
            "label_effect": arr(self.label_effect),
        })

    @classmethod
    def from_dict(cls, doc: dict) -> ComBatModel:
        p = io.unwrap(doc, "combat")
        f = np.asarray
        return cls(
            feature_names=tuple(p["feature_names"]),
            sites=tuple(p["sites"]),
            site_counts=tuple(p["site_counts"]),
            grand_mean=f(p["grand_mean"], dtype=float),
            pooled_std=f(p["pooled_std"], dtype=float),
            gamma_hat=f(p["gamma_hat"], dtype=float),
            delta_hat=f(p["delta_hat"], dtype=float),
            gamma_star=f(p["gamma_star"], dtype=float),
            delta_star=f(p["delta_star"], dtype=float),
            gamma_bar=p["gamma_bar"],
            tau2=p["tau2"],
            a_prior=p["a_prior"],
            b_prior=p["b_prior"],
            constant=f(p["constant"], dtype=bool),
            iterations=p["iterations"],
            prior_pooling=p["prior_pooling"],
            preserve_labels=p["preserve_labels"],
            label_effect=None if p["label_effect"] is None else f(p["label_effect"], dtype=float),
        )


def _label_column(t: FeatureTable) -> np.ndarray:
    if UNKNOWN in t.labels:
        raise ValidationError("preserve_labels requires every subject to have a diagnosis")
    return np.array([lab == MDD for lab in t.labels], dtype=float)


def _standardize(t: FeatureTable, sites: list[str], preserve_labels: bool):
    """Grand mean, pooled std, optional label effect and standardized data."""
    x = t.values
    n, p = x.shape
    site_idx = np.array([sites.index(s) for s in t.site_ids])
    design = np.zeros((n, len(sites)))
    design[np.arange(n), site_idx] = 1.0
    counts = design.sum(axis=0)
    if preserve_labels:
        lab = _label_column(t)
        design = np.column_stack([design, lab])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise ValidationError("diagnosis is confounded with site; cannot preserve labels")
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    grand_mean = (counts / n) @ coef[: len(sites)]
    label_effect = coef[len(sites)] if preserve_labels else None
    resid = x - design @ coef
    dof = n - design.shape[1]
    if dof < 1:
        raise ValidationError("too few subjects to estimate the pooled variance")
    var_pooled = (resid ** 2).sum(axis=0) / dof
    constant = ~(var_pooled > 0) | (np.ptp(x, axis=0) == 0)
    pooled_std = np.where(constant, 0.0, np.sqrt(var_pooled))
    stand_mean = np.broadcast_to(grand_mean, x.shape).copy()
    if preserve_labels:
        stand_mean += np.outer(lab, label_effect)
    z = (x - stand_mean) / np.where(constant, 1.0, pooled_std)
    z[:, constant] = 0.0
    return grand_mean, pooled_std, label_effect, constant, z, site_idx


def _moments(gamma_hat, delta2_hat, constant, axis):
    """Method-of-moments hyperparameters along ``axis``; NaN where degenerate."""
    keep = ~constant
    g = gamma_hat[:, keep]
    d = delta2_hat[:, keep]
    ax = 1 if axis == "features" else 0
    count = g.shape[ax]
    shape = g.shape[1 - ax]
    nan = np.full(shape, np.nan)
    if count < 2:
        return nan, nan.copy(), nan.copy(), nan.copy()
    gbar = g.mean(axis=ax)
    t2 = g.var(axis=ax, ddof=1)
    m = d.mean(axis=ax)
    s2 = d.var(axis=ax, ddof=1)
    t2_ok = np.isfinite(t2) & (t2 > _DEGENERATE * np.maximum(1.0, gbar ** 2))
    s2_ok = np.isfinite(s2) & (s2 > _DEGENERATE * m ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (2 * s2 + m ** 2) / s2
        b = (m * s2 + m ** 3) / s2
    gbar = np.where(t2_ok, gbar, np.nan)
    t2 = np.where(t2_ok, t2, np.nan)
    a = np.where(s2_ok, a, np.nan)
    b = np.where(s2_ok, b, np.nan)
    return gbar, t2, a, b


def _expand(prior, n_sites, n_features, constant, axis):
    """Broadcast per-site or per-feature priors to (n_sites, n_features)."""
    out = np.full((n_sites, n_features), np.nan)
    if axis == "features":
        out[:] = np.asarray(prior, dtype=float)[:, None]
    else:
        out[:, ~constant] = np.asarray(prior, dtype=float)[None, :]
    return out


def _shrink(z, site_idx, counts, gamma_hat, delta2_hat, gbar, t2, a, b):
    """Fixed-point iteration for the posterior location and variance."""
    n = np.asarray(counts, dtype=float)[:, None]
    eb_g = np.isfinite(t2) & np.isfinite(gbar)
    eb_d = np.isfinite(a) & np.isfinite(b)
    # where the prior is degenerate, hold the raw estimate fixed
    t2 = np.where(eb_g, t2, 0.0)
    gbar = np.where(eb_g, gbar, 0.0)
    a = np.where(eb_d, a, 2.0)
    b = np.where(eb_d, b, 0.0)
    g_old = gamma_hat.copy()
    d_old = delta2_hat.copy()
    it = 0
    err = np.seterr(divide="ignore", invalid="ignore")
    try:
        for it in range(1, MAX_ITER + 1):
            g_new = np.where(eb_g, (n * t2 * gamma_hat + d_old * gbar) / (n * t2 + d_old),
                             gamma_hat)
            ss = np.zeros_like(g_new)
            for i in range(g_new.shape[0]):
                rows = z[site_idx == i]
                ss[i] = ((rows - g_new[i]) ** 2).sum(axis=0)
            d_new = np.where(eb_d, (b + 0.5 * ss) / (n / 2.0 + a - 1.0), delta2_hat)
            change = max(np.max(np.abs(g_new - g_old), initial=0.0),
                         np.max(np.abs(d_new - d_old), initial=0.0))
            g_old, d_old = g_new, d_new
            if change < CONV_TOL:
                break
        else:
            warnings.warn(f"ComBat EB iteration hit the {MAX_ITER}-iteration cap", stacklevel=3)
    finally:
        np.seterr(**err)
    return g_old, d_old, it


def _site_estimates(z, site_idx, n_sites):
    p = z.shape[1]
    gamma_hat = np.zeros((n_sites, p))
    delta2_hat = np.ones((n_sites, p))
    for i in range(n_sites):
        rows = z[site_idx == i]
        gamma_hat[i] = rows.mean(axis=0)
        delta2_hat[i] = rows.var(axis=0, ddof=1)
    return gamma_hat, delta2_hat


def _finish(gamma_star, delta2_star, constant):
    gamma_star = gamma_star.copy()
    delta2_star = delta2_star.copy()
    gamma_star[:, constant] = 0.0
    delta2_star[:, constant] = 1.0
    # a site whose values are constant on a feature has zero variance there
    delta2_star = np.where(delta2_star > 0, delta2_star, 1.0)
    return gamma_star, np.sqrt(delta2_star)


def _nan_to_none(a) -> list:
    a = np.asarray(a, dtype=float)
    return [None if not np.isfinite(v) else float(v) for v in a.ravel()]


def combat_fit(t: FeatureTable, prior_pooling: str = "sites",
               preserve_labels: bool = False, eb: bool = True) -> ComBatModel:
    """Estimate ComBat parameters on ``t``.

    Parameters
    ----------
    t : FeatureTable
        Every site needs at least two subjects.
    prior_pooling : {"sites", "features"}
        What the empirical-Bayes prior of each (site, feature) pools over:
        one prior per feature across sites, or one per site across features.
    preserve_labels : bool
        Keep the MDD/NC mean difference out of the site adjustment.  Needs
        labels again at apply time, so it leaks diagnosis into test-time
        preprocessing; off by default.
    eb : bool
        ``False`` skips shrinkage and uses the raw per-site estimates.
    """
    if prior_pooling not in ("features", "sites"):
        raise ValidationError(f"prior_pooling must be 'features' or 'sites', not {prior_pooling!r}")
    if t.n_subjects == 0:
        raise ValidationError("cannot fit ComBat on an empty table")
    sites = sorted(set(t.site_ids))
    counts = [t.site_ids.count(s) for s in sites]
    small = [s for s, c in zip(sites, counts) if c < 2]
    if small:
        raise ValidationError(f"ComBat needs >= 2 subjects per site; too few in {small}")

    grand_mean, pooled_std, label_effect, constant, z, site_idx = _standardize(
        t, sites, preserve_labels)
    if constant.any():
        warnings.warn(f"{int(constant.sum())} zero-variance feature(s) pass through ComBat "
                      "unchanged", stacklevel=2)
    n_sites, p = len(sites), t.n_features
    gamma_hat, delta2_hat = _site_estimates(z, site_idx, n_sites)

    if eb:
        gbar, t2, a, b = _moments(gamma_hat, delta2_hat, constant, prior_pooling)
        full = [_expand(v, n_sites, p, constant, prior_pooling) for v in (gbar, t2, a, b)]
        if not (np.all(np.isfinite(full[1][:, ~constant])) and np.all(np.isfinite(full[2][:, ~constant]))):
            warnings.warn("degenerate ComBat prior moments; using raw site estimates where "
                          "shrinkage is undefined", stacklevel=2)
        g_star, d2_star, iters = _shrink(z, site_idx, counts, gamma_hat, delta2_hat, *full)
    else:
        gbar = t2 = a = b = np.full(n_sites if prior_pooling == "features" else int((~constant).sum()), np.nan)
        g_star, d2_star, iters = gamma_hat, delta2_hat, 0
    gamma_star, delta_star = _finish(g_star, d2_star, constant)
    log.debug("ComBat fit: %d sites, %d features, %d EB iterations", n_sites, p, iters)

    return ComBatModel(
        feature_names=t.feature_names,
        sites=tuple(sites),
        site_counts=tuple(counts),
        grand_mean=grand_mean,
        pooled_std=pooled_std,
        gamma_hat=gamma_hat,
        delta_hat=np.sqrt(np.where(delta2_hat > 0, delta2_hat, 0.0)),
        gamma_star=gamma_star,
        delta_star=delta_star,
        gamma_bar=_nan_to_none(gbar),
        tau2=_nan_to_none(t2),
        a_prior=_nan_to_none(a),
        b_prior=_nan_to_none(b),
        constant=constant,
        iterations=iters,
        prior_pooling=prior_pooling,
        preserve_labels=preserve_labels,
        label_effect=label_effect,
    )


def _stand_mean(m: ComBatModel, t: FeatureTable) -> np.ndarray:
    mean = np.broadcast_to(m.grand_mean, t.values.shape).copy()
    if m.preserve_labels:
        mean += np.outer(_label_column(t), m.label_effect)
    return mean


def combat_apply(m: ComBatModel, t: FeatureTable) -> FeatureTable:
    """Remove the fitted site effects from ``t``.

    Every site of ``t`` must have been seen at fit time (see
    :func:`combat_add_sites` for held-out sites).
    """
    if t.feature_names != m.feature_names:
        raise ValidationError("ComBat model was fitted on different features")
    idx = np.array([m.site_index(s) for s in t.site_ids], dtype=np.int64)
    x = t.values
    scale = np.where(m.constant, 1.0, m.pooled_std)
    stand = _stand_mean(m, t)
    z = (x - stand) / scale
    out = m.pooled_std * (z - m.gamma_star[idx]) / m.delta_star[idx] + stand
    out[:, m.constant] = x[:, m.constant]
    return t.with_values(out)


def combat_add_sites(m: ComBatModel, t: FeatureTable) -> ComBatModel:
    """Estimate parameters for sites of ``t`` that ``m`` has not seen.

    Grand mean and pooled std stay those of ``m``; only the new sites'
    location/scale are estimated (with EB shrinkage) from their own,
    unlabeled data.  Sites already in ``m`` are left untouched.
    """
    if t.feature_names != m.feature_names:
        raise ValidationError("ComBat model was fitted on different features")
    new = sorted(set(t.site_ids) - set(m.sites))
    if not new:
        return m
    counts = [t.site_ids.count(s) for s in new]
    small = [s for s, c in zip(new, counts) if c < 2]
    if small:
        raise ValidationError(f"ComBat needs >= 2 subjects per site; too few in {small}")
    rows = np.array([i for i, s in enumerate(t.site_ids) if s in new])
    sub = t.take(rows)
    site_idx = np.array([new.index(s) for s in sub.site_ids])
    scale = np.where(m.constant, 1.0, m.pooled_std)
    z = (sub.values - _stand_mean(m, sub)) / scale
    z[:, m.constant] = 0.0
    gamma_hat, delta2_hat = _site_estimates(z, site_idx, len(new))
    p = t.n_features
    if m.prior_pooling == "features":
        gbar, t2, a, b = _moments(gamma_hat, delta2_hat, m.constant, "features")
        full = [_expand(v, len(new), p, m.constant, "features") for v in (gbar, t2, a, b)]
    else:
        full = [_expand(np.array(v, dtype=float), len(new), p, m.constant, "sites")
                for v in (m.gamma_bar, m.tau2, m.a_prior, m.b_prior)]
        gbar = t2 = a = b = np.full(len(new), np.nan)
    g_star, d2_star, iters = _shrink(z, site_idx, counts, gamma_hat, delta2_hat, *full)
    gamma_star, delta_star = _finish(g_star, d2_star, m.constant)

    def extend(old, extra):
        return old + _nan_to_none(extra) if m.prior_pooling == "features" else old

    return replace(
        m,
        sites=m.sites + tuple(new),
        site_counts=m.site_counts + tuple(counts),
        gamma_hat=np.vstack([m.gamma_hat, gamma_hat]),
        delta_hat=np.vstack([m.delta_hat, np.sqrt(np.maximum(delta2_hat, 0.0))]),
        gamma_star=np.vstack([m.gamma_star, gamma_star]),
        delta_star=np.vstack([m.delta_star, delta_star]),
        gamma_bar=extend(m.gamma_bar, gbar),
        tau2=extend(m.tau2, t2),
        a_prior=extend(m.a_prior, a),
        b_prior=extend(m.b_prior, b),
        iterations=max(m.iterations, iters),
    )
