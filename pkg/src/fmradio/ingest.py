"""Loading and standardization of rectangular feature data.

Columns are centered and scaled to unit variance (denominator n - 1). The
applied means/sds are kept so that held-out observations can be mapped onto
the training scale later.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RawDataset",
    "ColumnStats",
    "StandardizedMatrix",
    "load_csv",
    "standardize",
    "apply_stats",
]


@dataclass(frozen=True)
class RawDataset:
    """Complete numeric feature matrix with an optional survival outcome."""

    features: np.ndarray
    feature_names: tuple[str, ...]
    time: np.ndarray | None = None
    status: np.ndarray | None = None

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=float))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        n, p = feats.shape
        if n < 2:
            raise ValueError(f"need at least 2 rows, got {n}")
        if p < 1:
            raise ValueError("need at least 1 feature column")
        if len(self.feature_names) != p:
            raise ValueError(
                f"{len(self.feature_names)} feature names for {p} columns"
            )
        if not np.all(np.isfinite(feats)):
            i, j = (int(v) for v in np.argwhere(~np.isfinite(feats))[0])
            raise ValueError(
                f"missing or non-finite cell at row {i + 1}, "
                f"column '{self.feature_names[j]}'"
            )
        if (self.time is None) != (self.status is None):
            raise ValueError("survival outcome needs both time and status")
        if self.time is not None:
            t = np.asarray(self.time, dtype=float)
            s = np.asarray(self.status, dtype=float)
            if t.shape != (n,) or s.shape != (n,):
                raise ValueError("survival vectors must have one entry per row")
            if np.any(t <= 0):
                bad = int(np.flatnonzero(t <= 0)[0])
                raise ValueError(f"survival time must be > 0 (row {bad + 1})")
            if not np.all(np.isin(s, (0.0, 1.0))):
                bad = int(np.flatnonzero(~np.isin(s, (0.0, 1.0)))[0])
                raise ValueError(f"status must be 0 or 1 (row {bad + 1})")
            object.__setattr__(self, "time", t)
            object.__setattr__(self, "status", s.astype(int))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ColumnStats:
    """Per-column means and standard deviations used for standardization."""

    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "sds", np.asarray(self.sds, dtype=float))
        if self.means.shape != self.sds.shape:
            raise ValueError("means and sds must have equal length")
        if np.any(self.sds <= 0):
            raise ValueError("standard deviations must be strictly positive")


@dataclass(frozen=True)
class StandardizedMatrix:
    """Column-standardized data plus the statistics that produced it.

    ``fitted_on_self`` is True when the statistics were estimated from this
    very matrix, in which case every column has mean 0 and sample sd 1.
    """

    data: np.ndarray
    stats: ColumnStats
    fitted_on_self: bool

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def p(self) -> int:
        return self.data.shape[1]


def load_csv(path, survival_columns: tuple[str, str] | None = None) -> RawDataset:
    """Read a numeric CSV (header row required) into a RawDataset.

    Parameters
    ----------
    path : str or Path
        CSV file, comma separated, UTF-8, decimal point, no quoting.
    survival_columns : (time_name, status_name), optional
        Columns to extract as the survival outcome; they are removed from
        the feature block.

    Raises
    ------
    FileNotFoundError, ValueError
        Missing file, duplicate column names, non-numeric cells (the
        offending row/column is reported), or invalid survival values.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise ValueError(f"{path}: duplicate column names: {dupes}")
        rows = []
        for irow, rec in enumerate(reader, start=1):
            if len(rec) != len(header):
                raise ValueError(
                    f"{path}: data row {irow} has {len(rec)} cells, "
                    f"expected {len(header)}"
                )
            vals = []
            for name, cell in zip(header, rec):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric cell '{cell.strip()}' at data "
                        f"row {irow}, column '{name}'"
                    ) from None
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    matrix = np.asarray(rows, dtype=float)

    time = status = None
    if survival_columns is not None:
        tname, sname = survival_columns
        for name in (tname, sname):
            if name not in header:
                raise ValueError(f"{path}: survival column '{name}' not found")
        ti, si = header.index(tname), header.index(sname)
        time, status = matrix[:, ti], matrix[:, si]
        keep = [j for j in range(len(header)) if j not in (ti, si)]
        matrix = matrix[:, keep]
        header = [header[j] for j in keep]
        if not header:
            raise ValueError(f"{path}: no feature columns left after "
                             "extracting the survival outcome")
    return RawDataset(matrix, tuple(header), time=time, status=status)


def standardize(raw: RawDataset) -> tuple[StandardizedMatrix, ColumnStats]:
    """Center and scale every column to mean 0 and sample sd 1 (ddof=1)."""
    x = raw.features
    means = x.mean(axis=0)
    sds = x.std(axis=0, ddof=1)
    if np.any(sds == 0):
        j = int(np.flatnonzero(sds == 0)[0])
        raise ValueError(
            f"column '{raw.feature_names[j]}' has zero variance and cannot "
            "be standardized"
        )
    stats = ColumnStats(means, sds)
    z = (x - means) / sds
    return StandardizedMatrix(z, stats, fitted_on_self=True), stats


def apply_stats(raw: RawDataset, stats: ColumnStats) -> StandardizedMatrix:
    """Standardize with externally supplied (training) means and sds."""
    if raw.p != stats.means.shape[0]:
        raise ValueError(
            f"data has {raw.p} columns but stats describe "
            f"{stats.means.shape[0]}"
        )
    z = (raw.features - stats.means) / stats.sds
    return StandardizedMatrix(z, stats, fitted_on_self=False)
