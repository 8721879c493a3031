"""Group comparison statistics: pooled two-sample t-test per feature."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .data import MDD, NC, FeatureTable
from .errors import ValidationError

STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


def stars(p: float) -> str:
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return "ns"


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t.

    Uses ``P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)``.
    """
    if df <= 0:
        raise ValidationError("degrees of freedom must be positive")
    if not np.isfinite(t):
        return 0.0
    return float(betainc(0.5 * df, 0.5, df / (df + t * t)))


def pooled_ttest(a, b) -> tuple[float, int, float]:
    """Student's t with pooled variance: ``(t, df, p)`` for mean(a) - mean(b).

    Two identical constant samples give t = 0, p = 1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValidationError(f"each group needs at least 2 values (got {na} and {nb})")
    df = na + nb - 2
    diff = a.mean() - b.mean()
    ss = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
    se = np.sqrt(ss / df * (1.0 / na + 1.0 / nb))
    if se == 0.0:
        if diff == 0.0:
            return 0.0, df, 1.0
        t = float(np.copysign(np.inf, diff))
        return t, df, 0.0
    t = float(diff / se)
    return t, df, t_two_sided_p(t, df)


@dataclass(frozen=True)
class FeatureTest:
    feature: str
    mean_mdd: float
    std_mdd: float
    mean_nc: float
    std_nc: float
    t: float
    df: int
    p: float
    stars: str


@dataclass(frozen=True)
class GroupStatsReport:
    tests: tuple[FeatureTest, ...]

    def by_name(self) -> dict:
        return {r.feature: r for r in self.tests}

    def significant(self, p_threshold: float = 0.05) -> list[str]:
        return [r.feature for r in self.tests if r.p < p_threshold]

    def to_dict(self) -> dict:
        rows = []
        for r in self.tests:
            d = asdict(r)
            if not np.isfinite(r.t):
                d["t"] = "inf" if r.t > 0 else "-inf"
            rows.append(d)
        return {"tests": rows}

    def to_text(self) -> str:
        header = f"{'feature':<24} {'MDD mean±std':>16} {'NC mean±std':>16} {'t':>9} {'p':>10}  sig"
        lines = [header, "-" * len(header)]
        for r in self.tests:
            lines.append(
                f"{r.feature:<24} {r.mean_mdd:>+8.3f}±{r.std_mdd:<7.3f} {r.mean_nc:>+8.3f}±{r.std_nc:<7.3f}"
                f" {r.t:>9.3f} {r.p:>10.3g}  {r.stars}"
            )
        return "\n".join(lines) + "\n"


def group_ttest(t: FeatureTable, features: Sequence[str] | None = None) -> GroupStatsReport:
    """MDD vs NC pooled t-test for each feature.

    Features are z-scored over all labeled subjects first; this changes the
    displayed means but not t or p.
    """
    names = list(t.feature_names if features is None else features)
    sub = t.select(names)
    labels = np.array(sub.labels)
    mdd = labels == MDD
    nc = labels == NC
    if mdd.sum() < 2 or nc.sum() < 2:
        raise ValidationError(
            f"t-test needs at least 2 subjects per group (MDD={int(mdd.sum())}, NC={int(nc.sum())})"
        )
    x = sub.values[mdd | nc]
    mdd, nc = mdd[mdd | nc], nc[mdd | nc]
    mean, std = x.mean(axis=0), x.std(axis=0)
    z = (x - mean) / np.where(std > 0, std, 1.0)
    out = []
    for j, name in enumerate(names):
        a, b = z[mdd, j], z[nc, j]
        tval, df, p = pooled_ttest(a, b)
        out.append(FeatureTest(name, float(a.mean()), float(a.std(ddof=1)), float(b.mean()),
                               float(b.std(ddof=1)), tval, df, p, stars(p)))
    return GroupStatsReport(tuple(out))
