"""Feature tables, connectivity matrices and the basic transforms on them.

A :class:`FeatureTable` is the interchange object of the whole package:
subjects in rows, named region-level features in columns, plus the site
and diagnosis of every subject.  Feature names follow ``<REGION>_<KIND>``,
e.g. ``PCG.L_ReHo``.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

MDD = "MDD"
NC = "NC"
UNKNOWN = "UNKNOWN"
LABELS = (MDD, NC, UNKNOWN)

FEATURE_KINDS = ("ReHo", "DC", "fALFF", "VMHC")

# AAL atlas, 90 cerebral regions, in atlas order.
AAL90_REGIONS = (
    "PreCG.L", "PreCG.R", "SFGdor.L", "SFGdor.R", "ORBsup.L", "ORBsup.R",
    "MFG.L", "MFG.R", "ORBmid.L", "ORBmid.R", "IFGoperc.L", "IFGoperc.R",
    "IFGtriang.L", "IFGtriang.R", "ORBinf.L", "ORBinf.R", "ROL.L", "ROL.R",
    "SMA.L", "SMA.R", "OLF.L", "OLF.R", "SFGmed.L", "SFGmed.R",
    "ORBsupmed.L", "ORBsupmed.R", "REC.L", "REC.R", "INS.L", "INS.R",
    "ACG.L", "ACG.R", "DCG.L", "DCG.R", "PCG.L", "PCG.R", "HIP.L", "HIP.R",
    "PHG.L", "PHG.R", "AMYG.L", "AMYG.R", "CAL.L", "CAL.R", "CUN.L", "CUN.R",
    "LING.L", "LING.R", "SOG.L", "SOG.R", "MOG.L", "MOG.R", "IOG.L", "IOG.R",
    "FFG.L", "FFG.R", "PoCG.L", "PoCG.R", "SPG.L", "SPG.R", "IPL.L", "IPL.R",
    "SMG.L", "SMG.R", "ANG.L", "ANG.R", "PCUN.L", "PCUN.R", "PCL.L", "PCL.R",
    "CAU.L", "CAU.R", "PUT.L", "PUT.R", "PAL.L", "PAL.R", "THA.L", "THA.R",
    "HES.L", "HES.R", "STG.L", "STG.R", "TPOsup.L", "TPOsup.R", "MTG.L",
    "MTG.R", "TPOmid.L", "TPOmid.R", "ITG.L", "ITG.R",
)

FLOAT_FORMAT = "{:.9g}"


def feature_kind(name: str) -> str:
    """Return the ``<KIND>`` suffix of a ``<REGION>_<KIND>`` feature name."""
    return name.rsplit("_", 1)[-1]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureTable:
    """Subjects x named features with per-subject site and diagnosis.

    Parameters
    ----------
    subject_ids, site_ids, labels : sequence of str
        One entry per row.  ``labels`` holds ``"MDD"``, ``"NC"`` or
        ``"UNKNOWN"``.
    feature_names : sequence of str
        One entry per column.
    values : array_like, shape (n_subjects, n_features)
        Finite feature values.  Stored as a read-only copy.
    """

    subject_ids: tuple[str, ...]
    site_ids: tuple[str, ...]
    labels: tuple[str, ...]
    feature_names: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "site_ids", tuple(str(s) for s in self.site_ids))
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        object.__setattr__(self, "feature_names", tuple(str(s) for s in self.feature_names))
        values = _frozen(self.values)
        if values.ndim == 1 and values.size == 0:
            values = values.reshape(len(self.subject_ids), len(self.feature_names))
        object.__setattr__(self, "values", values)

        n = len(self.subject_ids)
        if values.ndim != 2:
            raise ValidationError("values must be a 2-D matrix")
        if values.shape[0] != n or len(self.site_ids) != n or len(self.labels) != n:
            raise ValidationError(
                f"row count mismatch: values has {values.shape[0]} rows, "
                f"{n} subject ids, {len(self.site_ids)} sites, {len(self.labels)} labels"
            )
        if values.shape[1] != len(self.feature_names):
            raise ValidationError(
                f"values has {values.shape[1]} columns but {len(self.feature_names)} feature names"
            )
        dup = _first_duplicate(self.subject_ids)
        if dup is not None:
            raise ValidationError(f"duplicate subject id {dup!r}")
        dup = _first_duplicate(self.feature_names)
        if dup is not None:
            raise ValidationError(f"duplicate feature name {dup!r}")
        bad = [lab for lab in self.labels if lab not in LABELS]
        if bad:
            raise ValidationError(f"unknown label {bad[0]!r}")
        if not np.all(np.isfinite(values)):
            i, j = np.argwhere(~np.isfinite(values))[0]
            raise ValidationError(
                f"non-finite value for subject {self.subject_ids[i]!r}, "
                f"feature {self.feature_names[j]!r}"
            )

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def sites(self) -> list[str]:
        """Distinct site labels in order of first appearance."""
        return list(dict.fromkeys(self.site_ids))

    @property
    def y(self) -> np.ndarray:
        """Binary labels, 1 for MDD and 0 for NC.

        Raises if any subject is unlabeled.
        """
        if UNKNOWN in self.labels:
            raise ValidationError("table contains subjects with UNKNOWN diagnosis")
        return np.array([lab == MDD for lab in self.labels], dtype=np.int64)

    def take(self, rows: Sequence[int] | np.ndarray) -> FeatureTable:
        """Row subset, in the order given."""
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureTable(
            [self.subject_ids[i] for i in rows],
            [self.site_ids[i] for i in rows],
            [self.labels[i] for i in rows],
            self.feature_names,
            self.values[rows],
        )

    def select(self, names: Iterable[str]) -> FeatureTable:
        """Column subset by feature name, in the order given."""
        names = list(names)
        index = {n: j for j, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise ValidationError(f"unknown feature(s): {missing[:5]}")
        cols = [index[n] for n in names]
        return FeatureTable(self.subject_ids, self.site_ids, self.labels, names,
                            self.values[:, cols])

    def with_values(self, values: np.ndarray) -> FeatureTable:
        """Same metadata, new value matrix of identical shape."""
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise ValidationError(f"shape {values.shape} != {self.values.shape}")
        return FeatureTable(self.subject_ids, self.site_ids, self.labels,
                            self.feature_names, values)

    def equals(self, other: FeatureTable) -> bool:
        return (
            self.subject_ids == other.subject_ids
            and self.site_ids == other.site_ids
            and self.labels == other.labels
            and self.feature_names == other.feature_names
            and np.array_equal(self.values, other.values)
        )


def _first_duplicate(items: Sequence[str]) -> str | None:
    seen = set()
    for item in items:
        if item in seen:
            return item
        seen.add(item)
    return None


def _parse_label(token: str, row: int) -> str:
    t = token.strip().upper()
    if t == "":
        return UNKNOWN
    if t in (MDD, NC):
        return t
    raise ValidationError(f"row {row}: unknown label token {token!r} (expected MDD, NC or empty)")


def load_feature_table(path: str | os.PathLike) -> FeatureTable:
    """Read a feature table CSV.

    The header must be ``subject_id,site,label,<feature...>``.  Labels are
    ``MDD``/``NC`` (any case) or empty for unlabeled subjects.  Rows are
    numbered from 1 after the header in error messages.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if [h.lower() for h in header[:3]] != ["subject_id", "site", "label"]:
            raise ValidationError(
                f"{path}: header must start with subject_id,site,label; got {header[:3]}"
            )
        names = header[3:]
        ids, sites, labels, rows = [], [], [], []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ValidationError(
                    f"{path}: row {r} has {len(rec)} fields, header has {len(header)}"
                )
            ids.append(rec[0].strip())
            sites.append(rec[1].strip())
            labels.append(_parse_label(rec[2], r))
            vals = []
            for j, cell in enumerate(rec[3:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"{path}: row {r}, column {names[j]!r}: "
                        f"{'missing' if not cell.strip() else 'non-numeric'} value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ValidationError(
                        f"{path}: row {r}, column {names[j]!r}: non-finite value {cell!r}"
                    )
                vals.append(v)
            rows.append(vals)
    dup = _first_duplicate(ids)
    if dup is not None:
        raise ValidationError(f"{path}: duplicate subject id {dup!r}")
    values = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return FeatureTable(ids, sites, labels, names, values)


def write_feature_table(t: FeatureTable, path: str | os.PathLike) -> None:
    """Write ``t`` as CSV, floats with 9 significant digits."""
    from .io import atomic_write_text

    lines = [",".join(["subject_id", "site", "label", *t.feature_names])]
    for i in range(t.n_subjects):
        label = "" if t.labels[i] == UNKNOWN else t.labels[i]
        cells = [FLOAT_FORMAT.format(v) for v in t.values[i]]
        lines.append(",".join([t.subject_ids[i], t.site_ids[i], label, *cells]))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# connectivity

def fisher_r_to_z(r):
    """Fisher transform ``atanh(r)``; accepts scalars or arrays.

    Raises :class:`ValidationError` when any ``|r| >= 1``.
    """
    arr = np.asarray(r, dtype=float)
    if np.any(~(np.abs(arr) < 1.0)):
        raise ValidationError("Fisher r-to-z requires |r| < 1")
    z = np.arctanh(arr)
    return float(z) if z.ndim == 0 else z


@dataclass(frozen=True)
class ConnectivityMatrix:
    """Fisher-z functional connectivity of one subject.

    ``z_values`` must be symmetric (within 1e-12), have an exactly zero
    diagonal and finite entries.
    """

    subject_id: str
    z_values: np.ndarray = field(repr=False)

    def __post_init__(self):
        z = _frozen(self.z_values)
        object.__setattr__(self, "z_values", z)
        if z.ndim != 2 or z.shape[0] != z.shape[1]:
            raise ValidationError(f"{self.subject_id}: connectivity must be square, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValidationError(f"{self.subject_id}: non-finite connectivity entry")
        if np.any(np.diag(z) != 0.0):
            raise ValidationError(f"{self.subject_id}: connectivity diagonal must be exactly 0")
        if not np.allclose(z, z.T, rtol=0.0, atol=1e-12):
            raise ValidationError(f"{self.subject_id}: connectivity matrix is not symmetric")

    @property
    def size(self) -> int:
        return self.z_values.shape[0]

    @classmethod
    def from_correlation(cls, subject_id: str, r: np.ndarray) -> ConnectivityMatrix:
        """Build from a Pearson correlation matrix; the diagonal is ignored."""
        r = np.array(r, dtype=float)
        np.fill_diagonal(r, 0.0)
        z = fisher_r_to_z(r)
        return cls(subject_id, z)


def load_connectivity(path: str | os.PathLike) -> ConnectivityMatrix:
    """Read ``<subject_id>.fc.csv``: n rows of n comma-separated z values."""
    path = Path(path)
    name = path.name
    if not name.endswith(".fc.csv"):
        raise ValidationError(f"{path}: connectivity files must be named <subject_id>.fc.csv")
    try:
        z = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return ConnectivityMatrix(name[: -len(".fc.csv")], z)


def write_connectivity(c: ConnectivityMatrix, directory: str | os.PathLike) -> Path:
    from .io import atomic_write_text

    path = Path(directory) / f"{c.subject_id}.fc.csv"
    lines = [",".join(FLOAT_FORMAT.format(v) for v in row) for row in c.z_values]
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def degree_centrality(c: ConnectivityMatrix, threshold: float = 0.0) -> np.ndarray:
    """Weighted positive-edge degree of every node.

    ``DC_i = sum_{j != i} z_ij * [z_ij > threshold]``.
    """
    if threshold < 0:
        raise ValidationError("threshold must be >= 0")
    z = c.z_values
    kept = np.where(z > threshold, z, 0.0)
    np.fill_diagonal(kept, 0.0)
    return kept.sum(axis=1)


def dc_table(
    matrices: Sequence[ConnectivityMatrix],
    site_ids: Sequence[str],
    labels: Sequence[str],
    regions: Sequence[str] | None = None,
    threshold: float = 0.0,
) -> FeatureTable:
    """Degree-centrality block (one ``<REGION>_DC`` column per node)."""
    if not matrices:
        raise ValidationError("no connectivity matrices")
    n = matrices[0].size
    if any(m.size != n for m in matrices):
        raise ValidationError("connectivity matrices differ in size")
    if regions is None:
        regions = AAL90_REGIONS if n == len(AAL90_REGIONS) else [f"R{i + 1}" for i in range(n)]
    if len(regions) != n:
        raise ValidationError(f"{len(regions)} region names for {n}-node matrices")
    values = np.vstack([degree_centrality(m, threshold) for m in matrices])
    return FeatureTable([m.subject_id for m in matrices], site_ids, labels,
                        [f"{r}_DC" for r in regions], values)


# ---------------------------------------------------------------------------
# concatenation

def concatenate_features(parts: Sequence[FeatureTable]) -> FeatureTable:
    """Join feature blocks column-wise, aligning subjects by id.

    Subjects follow the first part's order.  Every part must hold the same
    subject set with matching site and label, and feature names must be
    distinct across parts.
    """
    if not parts:
        raise ValidationError("need at least one table to concatenate")
    first = parts[0]
    ref = set(first.subject_ids)
    names: list[str] = []
    blocks = []
    for k, part in enumerate(parts):
        ids = set(part.subject_ids)
        if ids != ref:
            diff = sorted(ids.symmetric_difference(ref))
            raise ValidationError(
                f"part {k}: subject set differs from part 0; symmetric difference "
                f"({len(diff)}): {diff[:10]}"
            )
        pos = {s: i for i, s in enumerate(part.subject_ids)}
        order = np.array([pos[s] for s in first.subject_ids], dtype=np.int64)
        for i, s in enumerate(first.subject_ids):
            j = order[i]
            if part.site_ids[j] != first.site_ids[i]:
                raise ValidationError(
                    f"part {k}: subject {s!r} has site {part.site_ids[j]!r}, "
                    f"part 0 says {first.site_ids[i]!r}"
                )
            if part.labels[j] != first.labels[i]:
                raise ValidationError(
                    f"part {k}: subject {s!r} has label {part.labels[j]!r}, "
                    f"part 0 says {first.labels[i]!r}"
                )
        names.extend(part.feature_names)
        blocks.append(part.values[order])
    dup = _first_duplicate(names)
    if dup is not None:
        raise ValidationError(f"duplicate feature name across parts: {dup!r}")
    return FeatureTable(first.subject_ids, first.site_ids, first.labels, names,
                        np.hstack(blocks))


# ---------------------------------------------------------------------------
# z-scoring

@dataclass(frozen=True)
class ZScoreParams:
    """Per-feature mean and population standard deviation."""

    feature_names: tuple[str, ...]
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if not (len(self.feature_names) == self.mean.size == self.std.size):
            raise ValidationError("z-score parameter lengths disagree")
        if np.any(self.std < 0):
            raise ValidationError("negative standard deviation")

    @property
    def constant(self) -> np.ndarray:
        """Mask of zero-variance features, which pass through unchanged."""
        return self.std == 0.0

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.mean.size:
            raise ValidationError(f"expected {self.mean.size} features, got {x.shape[-1]}")
        const = self.constant
        out = (x - self.mean) / np.where(const, 1.0, self.std)
        if const.any():
            out[..., const] = x[..., const]
        return out

    def to_dict(self) -> dict:
        return {"feature_names": list(self.feature_names),
                "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ZScoreParams:
        return cls(d["feature_names"], d["mean"], d["std"])


def zscore_fit(t: FeatureTable) -> ZScoreParams:
    if t.n_subjects == 0:
        raise ValidationError("cannot fit z-score on an empty table")
    mean = t.values.mean(axis=0)
    std = t.values.std(axis=0)
    # exactly-constant columns can leave rounding noise in std
    std[np.ptp(t.values, axis=0) == 0] = 0.0
    params = ZScoreParams(t.feature_names, mean, std)
    if params.constant.any():
        warnings.warn(f"{int(params.constant.sum())} zero-variance feature(s) pass through "
                      "z-scoring unchanged", stacklevel=2)
    return params


def zscore_apply(p: ZScoreParams, t: FeatureTable) -> FeatureTable:
    if tuple(p.feature_names) != t.feature_names:
        raise ValidationError("z-score parameters were fitted on different features")
    return t.with_values(p.transform(t.values))
