"""Seeded multi-site two-class feature tables with known ground truth.

Feature ``j`` of subject ``i`` at site ``s`` is

    x = alpha_j + beta_j * [MDD] + gamma_sj + delta_sj * eps

with ``eps`` standard normal (optionally equicorrelated across features),
which is exactly the additive-location / multiplicative-scale model that
ComBat assumes.  Effect sizes ``beta`` are in units of the within-site
noise std.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .data import AAL90_REGIONS, FEATURE_KINDS, MDD, NC, FeatureTable, write_feature_table
from .errors import ValidationError

N_PLANTED = 13


def feature_names(n_regions: int = 90) -> tuple[str, ...]:
    """``<REGION>_<KIND>`` names, one block of regions per kind."""
    regions = AAL90_REGIONS if n_regions == len(AAL90_REGIONS) else [
        f"R{i + 1}" for i in range(n_regions)]
    return tuple(f"{r}_{k}" for k in FEATURE_KINDS for r in regions)


def spread_indices(d: int, count: int = N_PLANTED) -> tuple[int, ...]:
    """``count`` indices spaced evenly over ``range(d)``, so every feature
    block holds a share of them."""
    if count > d:
        raise ValidationError(f"cannot plant {count} features among {d}")
    step = d / count
    return tuple(int(step * i + step / 2) for i in range(count))


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``subjects_per_site`` and ``mdd_fraction`` take a scalar (same for every
    site) or one value per site.  ``effect`` is a scalar or one value per
    planted feature; signs alternate when ``alternate_signs`` is set.
    ``site_shift`` and ``site_scale`` set the spread of the per-site,
    per-feature location offsets (normal std) and log-scale factors.
    """

    seed: int = 0
    n_sites: int = 4
    subjects_per_site: int | tuple[int, ...] = 100
    mdd_fraction: float | tuple[float, ...] = 0.5
    n_regions: int = 90
    planted: tuple[int, ...] | None = None
    effect: float | tuple[float, ...] = 1.0
    alternate_signs: bool = True
    site_shift: float = 0.0
    site_scale: float = 0.0
    noise: float = 1.0
    equicorrelation: float = 0.0

    def __post_init__(self):
        for name in ("subjects_per_site", "mdd_fraction", "effect", "planted"):
            v = getattr(self, name)
            if isinstance(v, list):
                object.__setattr__(self, name, tuple(v))
        if self.n_sites < 1:
            raise ValidationError("n_sites must be >= 1")
        if self.n_regions < 1:
            raise ValidationError("n_regions must be >= 1")
        counts, fracs = self.site_counts(), self.site_fractions()
        if any(c < 2 for c in counts):
            raise ValidationError("every site needs at least 2 subjects")
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValidationError("mdd_fraction must lie in [0, 1]")
        planted = self.planted_indices()
        if len(set(planted)) != len(planted) or any(not 0 <= j < self.d for j in planted):
            raise ValidationError(f"planted indices must be distinct and lie in [0, {self.d})")
        if not np.all(np.isfinite(self.effects())):
            raise ValidationError("effect sizes must be finite")
        if self.noise <= 0 or self.site_shift < 0 or self.site_scale < 0:
            raise ValidationError("noise must be > 0 and site spreads >= 0")
        if not 0.0 <= self.equicorrelation < 1.0:
            raise ValidationError("equicorrelation must lie in [0, 1)")

    @property
    def d(self) -> int:
        return self.n_regions * len(FEATURE_KINDS)

    def _per_site(self, v, name):
        if isinstance(v, tuple):
            if len(v) != self.n_sites:
                raise ValidationError(f"{name} lists {len(v)} values for {self.n_sites} sites")
            return list(v)
        return [v] * self.n_sites

    def site_counts(self) -> list[int]:
        return [int(c) for c in self._per_site(self.subjects_per_site, "subjects_per_site")]

    def site_fractions(self) -> list[float]:
        return [float(f) for f in self._per_site(self.mdd_fraction, "mdd_fraction")]

    def planted_indices(self) -> tuple[int, ...]:
        if self.planted is None:
            return spread_indices(self.d, min(N_PLANTED, self.d))
        return tuple(int(j) for j in self.planted)

    def effects(self) -> np.ndarray:
        n = len(self.planted_indices())
        if isinstance(self.effect, tuple):
            if len(self.effect) != n:
                raise ValidationError(f"{len(self.effect)} effect sizes for {n} planted features")
            beta = np.array(self.effect, dtype=float)
        else:
            beta = np.full(n, float(self.effect))
        if self.alternate_signs:
            beta = beta * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        return beta

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown synth option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SynthTruth:
    config: SynthConfig
    planted: tuple[int, ...]
    planted_names: tuple[str, ...]
    effects: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    sites: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return io.envelope("truth", {
            "config": self.config.to_dict(),
            "sites": list(self.sites),
            "planted": list(self.planted),
            "planted_names": list(self.planted_names),
            "effects": self.effects.tolist(),
            "alpha": self.alpha.tolist(),
            "gamma": self.gamma.tolist(),
            "delta": self.delta.tolist(),
        })


def generate(cfg: SynthConfig) -> tuple[FeatureTable, SynthTruth]:
    """Draw one table; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    names = feature_names(cfg.n_regions)
    planted = cfg.planted_indices()
    beta = np.zeros(d)
    beta[list(planted)] = cfg.effects() * cfg.noise
    alpha = rng.normal(size=d)
    gamma = cfg.site_shift * cfg.noise * rng.normal(size=(cfg.n_sites, d))
    delta = np.exp(cfg.site_scale * rng.normal(size=(cfg.n_sites, d)))
    sites = tuple(f"S{s + 1:02d}" for s in range(cfg.n_sites))

    ids, site_ids, labels, rows = [], [], [], []
    for s, (count, frac) in enumerate(zip(cfg.site_counts(), cfg.site_fractions())):
        n_mdd = int(round(frac * count))
        lab = np.array([MDD] * n_mdd + [NC] * (count - n_mdd))[rng.permutation(count)]
        eps = rng.normal(size=(count, d))
        if cfg.equicorrelation > 0:
            shared = rng.normal(size=(count, 1))
            eps = np.sqrt(cfg.equicorrelation) * shared + np.sqrt(1 - cfg.equicorrelation) * eps
        x = alpha + np.outer(lab == MDD, beta) + gamma[s] + delta[s] * cfg.noise * eps
        for i in range(count):
            ids.append(f"{sites[s]}-{i + 1:04d}")
            site_ids.append(sites[s])
            labels.append(str(lab[i]))
        rows.append(x)
    table = FeatureTable(ids, site_ids, labels, names, np.vstack(rows))
    truth = SynthTruth(cfg, planted, tuple(names[j] for j in planted), cfg.effects(),
                       alpha, gamma, delta, sites)
    return table, truth


def write_synth(cfg: SynthConfig, path: str | os.PathLike) -> tuple[FeatureTable, SynthTruth]:
    """Write ``path`` (CSV) and its ``.truth.json`` sidecar."""
    table, truth = generate(cfg)
    path = Path(path)
    write_feature_table(table, path)
    io.write_json(truth_path(path), truth.to_dict())
    return table, truth


def truth_path(csv_path: str | os.PathLike) -> Path:
    p = Path(csv_path)
    stem = p.name[:-4] if p.name.endswith(".csv") else p.name
    return p.with_name(stem + ".truth.json")
