"""Columnar dataset container, role specifications and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FAMILIES = ("gaussian", "binomial", "poisson")


class SchemaError(ValueError):
    """Raised when input data does not match the declared roles or types."""


@dataclass(frozen=True)
class Column:
    """A numeric or categorical column.

    Numeric columns hold float values. Categorical columns hold integer level
    indices into ``levels``.
    """

    name: str
    values: np.ndarray
    levels: tuple[str, ...] | None = None

    @property
    def is_categorical(self) -> bool:
        return self.levels is not None

    def __len__(self) -> int:
        return len(self.values)

    def take(self, idx: np.ndarray) -> "Column":
        return Column(self.name, self.values[idx], self.levels)


def numeric(name: str, values: Iterable[float]) -> Column:
    arr = np.asarray(values, dtype=float)
    if np.isnan(arr).any():
        raise SchemaError(f"column {name!r} contains missing values")
    arr.setflags(write=False)
    return Column(name, arr)


def categorical(name: str, values: Sequence[str], levels: Sequence[str] | None = None) -> Column:
    """Build a categorical column; levels default to order of first appearance."""
    if levels is None:
        seen: dict[str, int] = {}
        for v in values:
            seen.setdefault(str(v), len(seen))
        levels = list(seen)
    lookup = {lev: i for i, lev in enumerate(levels)}
    try:
        idx = np.array([lookup[str(v)] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise SchemaError(f"column {name!r}: unknown level {exc.args[0]!r}") from None
    idx.setflags(write=False)
    return Column(name, idx, tuple(str(lev) for lev in levels))


@dataclass(frozen=True)
class RoleSpec:
    """Assignment of dataset columns to model roles.

    ``varying`` columns get subgroup-specific coefficients, ``fixed`` columns a
    single global coefficient vector, and ``split_vars`` are the candidate
    partitioning variables.
    """

    response: str
    varying: tuple[str, ...] = ()
    fixed: tuple[str, ...] = ()
    split_vars: tuple[str, ...] = ()
    family: str = "gaussian"
    intercept: bool = True
    allow_overlap: bool = False

    def __post_init__(self):
        object.__setattr__(self, "varying", tuple(self.varying))
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "split_vars", tuple(self.split_vars))
        if self.family not in FAMILIES:
            raise SchemaError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not self.allow_overlap:
            groups = {"varying": self.varying, "fixed": self.fixed, "split": self.split_vars}
            names = list(groups)
            for i, a in enumerate(names):
                for b in names[i + 1:]:
                    common = set(groups[a]) & set(groups[b])
                    if common:
                        raise SchemaError(
                            f"columns {sorted(common)} appear in both {a} and {b} roles "
                            "(set allow_overlap to permit this)"
                        )
        if self.response in self.varying + self.fixed + self.split_vars:
            raise SchemaError(f"response {self.response!r} also used as a regressor")

    @property
    def columns(self) -> tuple[str, ...]:
        seen = dict.fromkeys((self.response,) + self.varying + self.fixed + self.split_vars)
        return tuple(seen)

    def replace(self, **changes) -> "RoleSpec":
        kw = dict(
            response=self.response, varying=self.varying, fixed=self.fixed,
            split_vars=self.split_vars, family=self.family, intercept=self.intercept,
            allow_overlap=self.allow_overlap,
        )
        kw.update(changes)
        return RoleSpec(**kw)


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of equal-length columns."""

    columns: Mapping[str, Column]
    n: int = field(init=False)

    def __post_init__(self):
        cols = dict(self.columns)
        if not cols:
            raise SchemaError("dataset has no columns")
        lengths = {len(c) for c in cols.values()}
        if len(lengths) != 1:
            raise SchemaError(f"columns have unequal lengths {sorted(lengths)}")
        n = lengths.pop()
        if n < 1:
            raise SchemaError("dataset has no rows")
        for c in cols.values():
            if c.is_categorical and len(c.values) and (c.values.min() < 0 or c.values.max() >= len(c.levels)):
                raise SchemaError(f"column {c.name!r} has level indices out of range")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "n", n)

    @classmethod
    def from_columns(cls, columns: Iterable[Column]) -> "Dataset":
        return cls({c.name: c for c in columns})

    @classmethod
    def from_arrays(cls, **arrays) -> "Dataset":
        cols = []
        for name, values in arrays.items():
            arr = np.asarray(values)
            if arr.dtype.kind in "OUS":
                cols.append(categorical(name, [str(v) for v in arr]))
            else:
                cols.append(numeric(name, arr))
        return cls.from_columns(cols)

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"missing column {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def values(self, name: str) -> np.ndarray:
        return self[name].values

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset({k: c.take(idx) for k, c in self.columns.items()})

    def require(self, names: Iterable[str]) -> None:
        for name in names:
            self[name]


def design_matrix(ds: Dataset, cols: Sequence[str], intercept: bool = True) -> tuple[np.ndarray, list[str]]:
    """Numeric model matrix for ``cols`` with treatment-contrast coding.

    Categorical columns with L levels contribute L-1 indicator columns (first
    level is the reference). Returns the matrix and its column names.
    """
    blocks = []
    names = []
    if intercept:
        blocks.append(np.ones((ds.n, 1)))
        names.append("(Intercept)")
    for name in cols:
        col = ds[name]
        if col.is_categorical:
            L = len(col.levels)
            ind = (col.values[:, None] == np.arange(1, L)[None, :]).astype(float)
            blocks.append(ind)
            names.extend(f"{name}{lev}" for lev in col.levels[1:])
        else:
            blocks.append(np.asarray(col.values, dtype=float)[:, None])
            names.append(name)
    if not blocks:
        return np.empty((ds.n, 0)), names
    return np.hstack(blocks), names


def check_response(ds: Dataset, spec: RoleSpec) -> np.ndarray:
    """Validate the response column against the family domain and return it."""
    col = ds[spec.response]
    if col.is_categorical:
        raise SchemaError(f"response {spec.response!r} must be numeric")
    y = np.asarray(col.values, dtype=float)
    if spec.family == "binomial":
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise SchemaError(
                f"binomial response {spec.response!r} must be 0/1; offending rows "
                f"{_row_list(bad)}"
            )
    elif spec.family == "poisson":
        bad = np.flatnonzero((y < 0) | (y != np.round(y)))
        if bad.size:
            raise SchemaError(
                f"poisson response {spec.response!r} must be a nonnegative integer; "
                f"offending rows {_row_list(bad)}"
            )
    return y


def _row_list(idx: np.ndarray, limit: int = 10) -> str:
    # 1-based data rows (header excluded)
    rows = [str(i + 1) for i in idx[:limit]]
    more = f" (+{idx.size - limit} more)" if idx.size > limit else ""
    return ", ".join(rows) + more


def read_csv(
    path: str | Path,
    spec: RoleSpec | None = None,
    categorical_cols: Iterable[str] = (),
    levels: Mapping[str, Sequence[str]] | None = None,
) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    Columns named in ``categorical_cols`` (or in ``levels``) are read as
    categorical; every other column must parse as a number. Columns whose
    values all fail to parse are auto-detected as categorical unless the column
    is the response; a column with only some unparsable cells is an error.
    Rows with missing values are rejected.
    """
    levels = dict(levels or {})
    cat_hint = set(categorical_cols) | set(levels)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file (no header row)") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]

    if spec is not None:
        missing = [name for name in spec.columns if name not in header]
        if missing:
            raise SchemaError(f"missing column(s) {', '.join(missing)} in {path}")

    missing_rows = []
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise SchemaError(f"{path}: row {i + 1} has {len(r)} fields, expected {len(header)}")
        if any(cell.strip() in ("", "NA", "NaN", "nan") for cell in r):
            missing_rows.append(i + 1)
    if missing_rows:
        raise SchemaError(
            f"{path}: {len(missing_rows)} row(s) contain missing values (rows "
            f"{', '.join(map(str, missing_rows[:10]))}{' ...' if len(missing_rows) > 10 else ''})"
        )

    response = spec.response if spec is not None else None
    cols = []
    for j, name in enumerate(header):
        raw = [r[j].strip() for r in rows]
        if name in cat_hint:
            cols.append(categorical(name, raw, levels.get(name)))
            continue
        values = np.empty(len(raw))
        bad = []
        for i, cell in enumerate(raw):
            try:
                values[i] = float(cell)
            except ValueError:
                bad.append(i)
                continue
            if math.isnan(values[i]):
                raise SchemaError(f"{path}: missing value at row {i + 1}, column {name!r}")
        if bad and (name == response or len(bad) < len(raw)):
            # a mostly numeric column with stray text is a data error, not a factor
            i = bad[0]
            raise SchemaError(f"{path}: unparsable value {raw[i]!r} at row {i + 1}, column {name!r}")
        if bad:
            values = None
        cols.append(numeric(name, values) if values is not None else categorical(name, raw))
    return Dataset.from_columns(cols)


def write_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        names = ds.names
        w.writerow(names)
        cols = []
        for name in names:
            c = ds[name]
            if c.is_categorical:
                cols.append([c.levels[i] for i in c.values])
            else:
                cols.append([repr(float(v)) for v in c.values])
        for row in zip(*cols):
            w.writerow(row)
