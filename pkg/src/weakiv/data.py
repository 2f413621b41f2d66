"""Data containers, fold partitioning, residualization and CSV ingestion.

The estimation pipeline works on three immutable containers:

* :class:`Dataset` — raw observations (outcome, treatment, instruments,
  covariates),
* :class:`FoldPartition` — a K-fold random split of observation indices
  used for cross-fitting,
* :class:`ResidualData` — the variables after partialling out the
  covariate regressions, which is all the moment machinery ever sees.

All containers freeze their arrays after validation; operations are pure
functions of their inputs plus an explicit seed, so everything here is safe
to share across threads and processes.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "ColumnSchema",
    "Dataset",
    "FoldPartition",
    "ResidualData",
    "load_csv",
    "write_csv",
    "make_folds",
    "residualize",
]


def _frozen(a, dtype=float) -> np.ndarray:
    """Copy to a contiguous array of the given dtype and make it read-only."""
    out = np.array(a, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV header names onto model roles.

    Parameters
    ----------
    outcome : str
        Name of the outcome column.
    treatment : str
        Name of the (endogenous) treatment column.
    instruments : sequence of str
        One or more instrument columns.
    covariates : sequence of str, optional
        Zero or more covariate columns.
    """

    outcome: str
    treatment: str
    instruments: tuple[str, ...]
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instruments", tuple(self.instruments))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.outcome or not self.treatment:
            raise ConfigError("schema needs both an outcome and a treatment column")
        if len(self.instruments) < 1:
            raise ConfigError("schema needs at least one instrument column")
        names = self.all_columns()
        dupes = {c for c in names if names.count(c) > 1}
        if dupes:
            raise ConfigError(f"schema maps column(s) {sorted(dupes)} to more than one role")

    def all_columns(self) -> list[str]:
        return [self.outcome, self.treatment, *self.instruments, *self.covariates]


@dataclass(frozen=True)
class Dataset:
    """Raw observations: outcome ``y``, treatment ``d``, instruments ``z``
    (n x m) and covariates ``x`` (n x p, possibly p = 0).

    All entries must be finite, the four containers must agree on n >= 2,
    and m >= 1. ``p = 0`` is allowed and means the covariate regressions
    degenerate to constants.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = _frozen(np.asarray(self.y).reshape(-1))
        d = _frozen(np.asarray(self.d).reshape(-1))
        z = np.asarray(self.z)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        z = _frozen(z)
        x = np.asarray(self.x)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(len(y), 0)
        x = _frozen(x)

        n = y.shape[0]
        if n < 2:
            raise DataError(f"need at least 2 observations, got {n}")
        if d.shape[0] != n or z.shape[0] != n or x.shape[0] != n:
            raise DataError(
                "row mismatch: y has %d rows, d %d, z %d, x %d"
                % (n, d.shape[0], z.shape[0], x.shape[0])
            )
        if z.shape[1] < 1:
            raise DataError("need at least one instrument column")
        for name, arr in (("y", y), ("d", d), ("z", z), ("x", x)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")

        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.z.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class FoldPartition:
    """A partition of ``{0, ..., n-1}`` into K disjoint folds.

    Fold sizes differ by at most one, so n need not be divisible by K.
    """

    folds: tuple[np.ndarray, ...]
    n: int

    def __post_init__(self):
        folds = tuple(_frozen(np.sort(np.asarray(f).reshape(-1)), dtype=np.intp) for f in self.folds)
        object.__setattr__(self, "folds", folds)
        if len(folds) < 2:
            raise ConfigError("need at least 2 folds")
        all_idx = np.concatenate(folds) if folds else np.array([], dtype=np.intp)
        if len(all_idx) != self.n or len(np.unique(all_idx)) != self.n:
            raise DataError("folds must partition 0..n-1 (disjoint and covering)")
        if all_idx.min() < 0 or all_idx.max() >= self.n:
            raise DataError("fold indices out of range")
        sizes = [len(f) for f in folds]
        if max(sizes) - min(sizes) > 1:
            raise DataError(f"fold sizes {sizes} differ by more than one")

    @property
    def K(self) -> int:
        return len(self.folds)

    def fold_of(self) -> np.ndarray:
        """Observation -> fold index map as an int array of length n."""
        out = np.empty(self.n, dtype=np.intp)
        for k, idx in enumerate(self.folds):
            out[idx] = k
        return out

    def complement(self, k: int) -> np.ndarray:
        """All indices outside fold ``k`` (the training set for fold k)."""
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[k]] = False
        return np.nonzero(mask)[0]


@dataclass(frozen=True)
class ResidualData:
    """Residualized variables: outcomes, treatment and instruments after
    subtracting out-of-fold covariate-regression predictions.

    ``fold_of`` maps each observation to the fold whose held-out model
    produced its predictions; a value of -1 marks residualization without
    cross-fitting (true functions or a full-sample fit).
    """

    y_bar: np.ndarray
    d_bar: np.ndarray
    z_bar: np.ndarray
    fold_of: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        y_bar = _frozen(np.asarray(self.y_bar).reshape(-1))
        d_bar = _frozen(np.asarray(self.d_bar).reshape(-1))
        z_bar = np.asarray(self.z_bar)
        if z_bar.ndim == 1:
            z_bar = z_bar.reshape(-1, 1)
        z_bar = _frozen(z_bar)
        n = y_bar.shape[0]
        if d_bar.shape[0] != n or z_bar.shape[0] != n:
            raise DataError("residualized variables disagree on n")
        fold_of = self.fold_of
        if fold_of is None:
            fold_of = np.full(n, -1, dtype=np.intp)
        fold_of = _frozen(np.asarray(fold_of).reshape(-1), dtype=np.intp)
        if fold_of.shape[0] != n:
            raise DataError("fold_of must have one entry per observation")
        for name, arr in (("y_bar", y_bar), ("d_bar", d_bar), ("z_bar", z_bar)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        object.__setattr__(self, "y_bar", y_bar)
        object.__setattr__(self, "d_bar", d_bar)
        object.__setattr__(self, "z_bar", z_bar)
        object.__setattr__(self, "fold_of", fold_of)

    @property
    def n(self) -> int:
        return self.y_bar.shape[0]

    @property
    def m(self) -> int:
        return self.z_bar.shape[1]


def load_csv(path: str | os.PathLike, schema: ColumnSchema) -> Dataset:
    """Read a CSV file (header row, one observation per line) into a Dataset.

    Cells in mapped columns must parse as finite decimal numbers; a row with
    a missing or non-numeric cell in any mapped column is rejected with an
    error naming the offending data row (1-based) and column.

    Parameters
    ----------
    path : str or path-like
        CSV file with a header row, UTF-8, comma separated.
    schema : ColumnSchema
        Role assignment for the columns used by the model. Columns not
        named in the schema are ignored.

    Returns
    -------
    Dataset
    """
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        pos = {name: i for i, name in enumerate(header)}
        missing = [c for c in schema.all_columns() if c not in pos]
        if missing:
            raise DataError(f"{path}: column(s) {missing} not found in header {header}")

        cols = schema.all_columns()
        idxs = [pos[c] for c in cols]
        rows: list[list[float]] = []
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue  # blank line
            vals = []
            for c, i in zip(cols, idxs):
                cell = row[i].strip() if i < len(row) else ""
                if not cell:
                    raise DataError(f"{path}: row {rownum}: missing value in column '{c}'")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {rownum}: non-numeric value '{cell}' in column '{c}'"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: row {rownum}: non-finite value '{cell}' in column '{c}'"
                    )
                vals.append(v)
            rows.append(vals)

    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 parseable rows, got {len(rows)}")
    arr = np.asarray(rows, dtype=float)
    n_inst = len(schema.instruments)
    y = arr[:, 0]
    d = arr[:, 1]
    z = arr[:, 2 : 2 + n_inst]
    x = arr[:, 2 + n_inst :]
    return Dataset(y=y, d=d, z=z, x=x)


def write_csv(ds: Dataset, path: str | os.PathLike, schema: ColumnSchema) -> None:
    """Write a Dataset to CSV with the column names given by ``schema``.

    Values are written with ``repr`` so that ``load_csv`` round-trips them
    bit-for-bit.
    """
    if len(schema.instruments) != ds.m or len(schema.covariates) != ds.p:
        raise ConfigError(
            "schema names %d instruments / %d covariates but dataset has m=%d, p=%d"
            % (len(schema.instruments), len(schema.covariates), ds.m, ds.p)
        )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.all_columns())
        for i in range(ds.n):
            row = [repr(float(ds.y[i])), repr(float(ds.d[i]))]
            row += [repr(float(v)) for v in ds.z[i]]
            row += [repr(float(v)) for v in ds.x[i]]
            writer.writerow(row)


def make_folds(n: int, K: int, seed) -> FoldPartition:
    """Draw a random K-fold partition of ``{0, ..., n-1}``.

    Deterministic given ``seed``; fold sizes differ by at most one.
    """
    if K < 2:
        raise ConfigError(f"need K >= 2 folds, got K={K}")
    if K > n:
        raise ConfigError(f"cannot split n={n} observations into K={K} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = tuple(np.sort(chunk) for chunk in np.array_split(perm, K))
    return FoldPartition(folds=folds, n=n)


def residualize(ds: Dataset, fits, folds: FoldPartition) -> ResidualData:
    """Subtract out-of-fold nuisance predictions from (y, d, z).

    ``fits`` must provide out-of-fold predictions aligned with the dataset:
    attributes ``ell_hat`` (n,), ``r_hat`` (n,) and ``alpha_hat`` (n, m).

    Returns
    -------
    ResidualData
        Residualized variables together with the observation -> fold map.
    """
    ell = np.asarray(fits.ell_hat, dtype=float).reshape(-1)
    r = np.asarray(fits.r_hat, dtype=float).reshape(-1)
    alpha = np.asarray(fits.alpha_hat, dtype=float)
    if alpha.ndim == 1:
        alpha = alpha.reshape(-1, 1)
    if ell.shape[0] != ds.n or r.shape[0] != ds.n or alpha.shape[0] != ds.n:
        raise DataError(
            "prediction missing: fits cover %d/%d/%d rows but dataset has n=%d"
            % (ell.shape[0], r.shape[0], alpha.shape[0], ds.n)
        )
    if alpha.shape[1] != ds.m:
        raise DataError(
            f"alpha predictions have {alpha.shape[1]} columns but dataset has m={ds.m}"
        )
    for name, arr in (("ell_hat", ell), ("r_hat", r), ("alpha_hat", alpha)):
        if not np.all(np.isfinite(arr)):
            raise DataError(f"non-finite prediction in {name}")
    if folds.n != ds.n:
        raise DataError(f"fold partition is over n={folds.n} but dataset has n={ds.n}")
    return ResidualData(
        y_bar=ds.y - ell,
        d_bar=ds.d - r,
        z_bar=ds.z - alpha,
        fold_of=folds.fold_of(),
    )
