"""Observation tables: CSV loading, validation, response transforms, scaling.

Tables are column-oriented and immutable by convention: every operation
returns a new DataTable and never mutates arrays in place, so tables are
safe to share across threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, GammkitError, ParseError, SchemaError, ShapeError

MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class FactorColumn:
    """Categorical column stored as level indices plus a level-name list."""

    codes: np.ndarray
    levels: tuple[str, ...]

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        object.__setattr__(self, "codes", codes)
        if codes.size and (codes.min() < 0 or codes.max() >= len(self.levels)):
            raise SchemaError("factor codes out of range for level list")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def __len__(self) -> int:
        return len(self.codes)

    def take(self, idx) -> "FactorColumn":
        return FactorColumn(self.codes[idx], self.levels)

    @classmethod
    def from_strings(cls, values: list[str]) -> "FactorColumn":
        # Sorted levels: deterministic under row reordering.
        levels = tuple(sorted(set(values)))
        index = {name: i for i, name in enumerate(levels)}
        codes = np.array([index[v] for v in values], dtype=np.int64)
        return cls(codes, levels)


@dataclass(frozen=True)
class DataTable:
    """Validated observation table.

    series_key/order_key designate the grouped time-series structure:
    series_key names a factor column (one level per series) and order_key a
    numeric column giving the within-series ordering.
    """

    columns: dict[str, object]
    n_rows: int
    series_key: str | None = None
    order_key: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, col in self.columns.items():
            if isinstance(col, FactorColumn):
                if len(col) != self.n_rows:
                    raise ShapeError(f"column {name!r} has {len(col)} rows, expected {self.n_rows}")
            else:
                arr = np.asarray(col, dtype=np.float64)
                if arr.ndim != 1 or arr.shape[0] != self.n_rows:
                    raise ShapeError(f"column {name!r} has wrong shape {arr.shape}")
                if not np.all(np.isfinite(arr)):
                    raise DomainError(f"column {name!r} contains non-finite values")
                self.columns[name] = arr
        if self.series_key is not None:
            if self.order_key is None:
                raise SchemaError("series_key requires order_key")
            series = self.factor(self.series_key)
            order = self.numeric(self.order_key)
            pairs = set(zip(series.codes.tolist(), order.tolist()))
            if len(pairs) != self.n_rows:
                raise SchemaError("(series, order) pairs are not unique")

    def numeric(self, name: str) -> np.ndarray:
        col = self._get(name)
        if isinstance(col, FactorColumn):
            raise SchemaError(f"column {name!r} is a factor, expected numeric")
        return col

    def factor(self, name: str) -> FactorColumn:
        col = self._get(name)
        if not isinstance(col, FactorColumn):
            raise SchemaError(f"column {name!r} is numeric, expected factor")
        return col

    def _get(self, name: str):
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"no column named {name!r}") from None

    def with_column(self, name: str, values) -> "DataTable":
        cols = dict(self.columns)
        cols[name] = values
        return replace(self, columns=cols)

    def take(self, idx) -> "DataTable":
        idx = np.asarray(idx)
        cols = {}
        for name, col in self.columns.items():
            cols[name] = col.take(idx) if isinstance(col, FactorColumn) else col[idx]
        n = int(idx.sum()) if idx.dtype == bool else len(idx)
        return replace(self, columns=cols, n_rows=n, meta=dict(self.meta))

    def column_names(self) -> list[str]:
        return list(self.columns)


def load_csv(path, schema: dict[str, str], series_key: str | None = None,
             order_key: str | None = None) -> DataTable:
    """Read an RFC-4180-style CSV into a validated DataTable.

    schema maps column name -> role ("numeric" | "factor"); only schema
    columns are loaded. Rows with a missing value ("" or "NA") in any schema
    column are dropped; the count is recorded in meta["dropped_rows"].
    """
    for role in schema.values():
        if role not in ("numeric", "factor"):
            raise SchemaError(f"unknown column role {role!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header required") from None
        rows = list(reader)
    positions = {}
    for name in schema:
        if name not in header:
            raise SchemaError(f"{path}: declared column {name!r} not in header")
        positions[name] = header.index(name)

    kept: dict[str, list] = {name: [] for name in schema}
    dropped = 0
    for i, row in enumerate(rows):
        cells = {}
        missing = False
        for name, pos in positions.items():
            if pos >= len(row) or row[pos].strip() in MISSING_TOKENS:
                missing = True
                break
            cells[name] = row[pos].strip()
        if missing:
            dropped += 1
            continue
        for name, raw in cells.items():
            if schema[name] == "numeric":
                try:
                    value = float(raw)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {i + 2}: cannot parse {raw!r} as numeric "
                        f"for column {name!r}") from None
                if not math.isfinite(value):
                    raise ParseError(f"{path}: row {i + 2}: non-finite value in {name!r}")
                kept[name].append(value)
            else:
                kept[name].append(raw)
    n = len(next(iter(kept.values()))) if kept else 0
    if n == 0:
        raise GammkitError(f"{path}: zero usable rows after missing-value removal")

    columns: dict[str, object] = {}
    for name, role in schema.items():
        if role == "numeric":
            columns[name] = np.array(kept[name], dtype=np.float64)
        else:
            columns[name] = FactorColumn.from_strings(kept[name])
    return DataTable(columns=columns, n_rows=n, series_key=series_key,
                     order_key=order_key, meta={"dropped_rows": dropped})


def rescale_unit(table: DataTable, column: str) -> DataTable:
    """Rescale a numeric column to [0, 1] via (x - min)/(max - min).

    The affine map back to the original scale is recorded in
    meta["scale_maps"][column] as (offset, scale): original = offset + scale*x.
    Composes with any previously recorded map, so applying twice is a no-op
    on values and keeps the map pointing at the original units.
    """
    x = table.numeric(column)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        raise DomainError(f"column {column!r} is constant; cannot rescale to unit interval")
    scaled = (x - lo) / (hi - lo)
    meta = dict(table.meta)
    maps = dict(meta.get("scale_maps", {}))
    prev_off, prev_scale = maps.get(column, (0.0, 1.0))
    maps[column] = (prev_off + prev_scale * lo, prev_scale * (hi - lo))
    meta["scale_maps"] = maps
    out = table.with_column(column, scaled)
    return replace(out, meta=meta)


def transform_response(table: DataTable, column: str, kind: str,
                       power: float | None = None) -> DataTable:
    """Apply a response transform: identity | log | neg1000_over | power.

    neg1000_over is -1000/y (y in milliseconds is the caller's
    responsibility). power is the Box-Cox transform (y^p - 1)/p, log at p=0.
    identity returns the table bit-identical (nothing recorded).
    """
    if kind == "identity":
        return table
    y = table.numeric(column)
    if kind in ("log", "neg1000_over") and np.any(y <= 0):
        row = int(np.argmax(y <= 0))
        raise DomainError(f"{kind} transform requires positive values; "
                          f"column {column!r} row {row} is {y[row]}")
    if kind == "log":
        z = np.log(y)
        label = "log"
    elif kind == "neg1000_over":
        z = -1000.0 / y
        label = "neg1000_over"
    elif kind == "power":
        if power is None:
            raise DomainError("power transform requires the exponent")
        if np.any(y <= 0):
            row = int(np.argmax(y <= 0))
            raise DomainError(f"power transform requires positive values; "
                              f"column {column!r} row {row} is {y[row]}")
        z = np.log(y) if power == 0 else (y ** power - 1.0) / power
        label = f"power({power:g})"
    else:
        raise DomainError(f"unknown transform kind {kind!r}")
    meta = dict(table.meta)
    transforms = dict(meta.get("transforms", {}))
    transforms[column] = label
    meta["transforms"] = transforms
    out = table.with_column(column, z)
    return replace(out, meta=meta)


def boxcox_profile(y, lam_grid=None) -> tuple[float, np.ndarray]:
    """Box-Cox profile log-likelihood over a lambda grid.

    For each lambda, transforms y, evaluates the Gaussian intercept-only
    log-likelihood at the ML variance, and adds the Jacobian term
    (lambda - 1) * sum(log y). Returns (argmax lambda, full profile).
    Single-parameter form (no shift).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise DomainError("empty response vector")
    if np.any(y <= 0):
        raise DomainError("Box-Cox requires strictly positive values")
    if lam_grid is None:
        lam_grid = np.linspace(-2.0, 2.0, 41)
    lam_grid = np.asarray(lam_grid, dtype=np.float64)
    if lam_grid.size == 0:
        raise DomainError("empty lambda grid")
    n = y.size
    log_y_sum = float(np.sum(np.log(y)))
    scores = np.empty(lam_grid.size)
    for i, lam in enumerate(lam_grid):
        z = np.log(y) if lam == 0 else (y ** lam - 1.0) / lam
        s2 = float(np.mean((z - z.mean()) ** 2))
        scores[i] = -0.5 * n * (np.log(2.0 * np.pi * s2) + 1.0) + (lam - 1.0) * log_y_sum
    best = int(np.argmax(scores))
    return float(lam_grid[best]), scores
