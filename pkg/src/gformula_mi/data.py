"""Longitudinal tables with an explicit missingness mask.

A table stores its columns in causal time order (L_0, A_0, L_1, ..., Y), a
float matrix of values, a boolean mask marking unusable cells, and a per-row
origin indicator (1 for observed rows, 0 for rows added by :func:`augment`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ValidationError

MISSING_TOKENS = frozenset({"NA", ""})
MISSING_OUT = "NA"


class Kind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class Role(str, Enum):
    BASELINE = "baseline_confounder"
    TIMEVARYING = "timevarying_confounder"
    TREATMENT = "treatment"
    OUTCOME = "outcome"


class Pattern(str, Enum):
    COMPLETE = "complete"
    MONOTONE = "monotone"
    NON_MONOTONE = "non_monotone"


@dataclass(frozen=True)
class Column:
    name: str
    kind: Kind
    role: Role
    time: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "role", Role(self.role))
        if int(self.time) < 0:
            raise ValidationError(f"column {self.name!r}: time index must be >= 0")

    @property
    def is_confounder(self) -> bool:
        return self.role in (Role.BASELINE, Role.TIMEVARYING)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "role": self.role.value, "time": self.time}


@dataclass(frozen=True)
class Schema:
    """Ordered column declarations. Declaration order is the causal order."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        if not cols:
            raise ValidationError("schema declares no columns")
        names = [c.name for c in cols]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ValidationError(f"duplicate column names: {sorted(dup)}")
        outcomes = [c for c in cols if c.role is Role.OUTCOME]
        if len(outcomes) != 1:
            raise ValidationError(f"schema needs exactly one outcome column, found {len(outcomes)}")
        if cols[-1].role is not Role.OUTCOME:
            raise ValidationError("outcome must be the last column in causal order")
        times = [c.time for c in cols[:-1]]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError("columns are not declared in nondecreasing time order")
        for c in cols:
            if c.role is Role.TREATMENT and c.kind is not Kind.BINARY:
                raise ValidationError(f"treatment column {c.name!r} must be binary")

    @classmethod
    def from_dicts(cls, items: Iterable[dict]) -> "Schema":
        cols = []
        for item in items:
            try:
                cols.append(Column(item["name"], item["kind"], item["role"], int(item.get("time", 0))))
            except KeyError as exc:
                raise ValidationError(f"column declaration missing field {exc}") from None
            except ValueError as exc:
                raise ValidationError(str(exc)) from None
        return cls(tuple(cols))

    def to_dicts(self) -> list[dict]:
        return [c.to_dict() for c in self.columns]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown column {name!r}") from None

    def column(self, name: str) -> Column:
        return self.columns[self.index(name)]

    @property
    def treatments(self) -> list[Column]:
        return [c for c in self.columns if c.role is Role.TREATMENT]

    @property
    def outcome(self) -> Column:
        return self.columns[-1]


@dataclass(frozen=True)
class Regime:
    """A static intervention: one fixed value per treatment column."""

    assignments: tuple[tuple[str, float], ...]
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple((str(k), float(v)) for k, v in self.assignments))

    @classmethod
    def from_values(cls, schema: Schema, values: Sequence[float], name: str | None = None) -> "Regime":
        treats = schema.treatments
        if len(values) != len(treats):
            raise ValidationError(
                f"regime has {len(values)} values but schema has {len(treats)} treatment columns")
        return cls(tuple((c.name, v) for c, v in zip(treats, values)), name)

    @classmethod
    def parse(cls, schema: Schema, spec) -> "Regime":
        """Accept ``"1,1,1"``, ``[1, 1, 1]`` or ``{"A0": 1, ...}``."""
        if isinstance(spec, Regime):
            return spec
        if isinstance(spec, str):
            return cls.from_values(schema, [float(x) for x in spec.split(",")], name=spec)
        if isinstance(spec, dict):
            return cls(tuple(spec.items()))
        return cls.from_values(schema, list(spec))

    def validate(self, schema: Schema) -> None:
        treat_names = [c.name for c in schema.treatments]
        seen = [k for k, _ in self.assignments]
        missing = [t for t in treat_names if t not in seen]
        extra = [k for k in seen if k not in treat_names]
        dups = sorted({k for k in seen if seen.count(k) > 1})
        problems = []
        if missing:
            problems.append(f"regime does not cover treatment columns {missing}")
        if extra:
            problems.append(f"regime assigns non-treatment columns {extra}")
        if dups:
            problems.append(f"regime assigns {dups} more than once")
        for k, v in self.assignments:
            if k in treat_names and v not in (0.0, 1.0):
                problems.append(f"regime value {v} for binary treatment {k!r} is not 0/1")
        if problems:
            raise ValidationError("; ".join(problems))

    def value(self, column: str) -> float:
        return dict(self.assignments)[column]

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return ",".join(f"{v:g}" for _, v in self.assignments)


@dataclass(frozen=True, eq=False)
class LongitudinalTable:
    """Immutable rectangular dataset.

    ``values`` holds NaN wherever ``mask`` is true; ``mask`` is authoritative.
    ``block`` is -1 for original rows and k for rows added by the k-th call to
    :func:`augment`.
    """

    schema: Schema
    values: np.ndarray
    mask: np.ndarray
    origin: np.ndarray
    block: np.ndarray = field(default=None)
    regimes: tuple[Regime, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2 or values.shape[1] != len(self.schema.columns):
            raise ValidationError(
                f"values shape {values.shape} does not match {len(self.schema.columns)} columns")
        mask = np.array(self.mask, dtype=bool, copy=True)
        if mask.shape != values.shape:
            raise ValidationError("mask shape does not match values")
        mask |= np.isnan(values)
        values[mask] = np.nan
        origin = np.asarray(self.origin, dtype=np.int8).copy()
        block = (np.where(origin == 1, -1, 0) if self.block is None
                 else np.asarray(self.block, dtype=np.int64).copy())
        for j, col in enumerate(self.schema.columns):
            if col.kind is Kind.BINARY:
                obs = values[~mask[:, j], j]
                if np.any((obs != 0.0) & (obs != 1.0)):
                    raise ValidationError(f"binary column {col.name!r} has values outside {{0, 1}}")
        for arr in (values, mask, origin, block):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "block", block)

    @classmethod
    def from_arrays(cls, schema: Schema, data: dict[str, np.ndarray]) -> "LongitudinalTable":
        n = len(next(iter(data.values())))
        values = np.column_stack([np.asarray(data[c], dtype=float) for c in schema.names]) \
            if n else np.empty((0, len(schema.columns)))
        return cls(schema, values, np.isnan(values), np.ones(n, dtype=np.int8))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> tuple[Column, ...]:
        return self.schema.columns

    def col(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def observed(self, name: str) -> np.ndarray:
        return ~self.mask[:, self.schema.index(name)]

    @property
    def n_missing(self) -> int:
        return int(self.mask.sum())

    def original(self) -> "LongitudinalTable":
        keep = self.origin == 1
        return LongitudinalTable(self.schema, self.values[keep], self.mask[keep], self.origin[keep])

    def take(self, rows: np.ndarray) -> "LongitudinalTable":
        rows = np.asarray(rows)
        return LongitudinalTable(self.schema, self.values[rows], self.mask[rows],
                                 self.origin[rows], self.block[rows], self.regimes)

    def replace_values(self, values: np.ndarray, mask: np.ndarray | None = None) -> "LongitudinalTable":
        return LongitudinalTable(self.schema, values, self.mask if mask is None else mask,
                                 self.origin, self.block, self.regimes)

    def equals(self, other: "LongitudinalTable") -> bool:
        return (self.schema == other.schema
                and np.array_equal(self.mask, other.mask)
                and np.array_equal(np.nan_to_num(self.values), np.nan_to_num(other.values))
                and np.array_equal(self.origin, other.origin))


def _parse_cell(token: str, col: Column, lineno: int) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return np.nan
    try:
        x = float(token)
    except ValueError:
        raise ValidationError(f"line {lineno}: malformed numeric cell {token!r} in column {col.name!r}") from None
    if not np.isfinite(x):
        raise ValidationError(f"line {lineno}: non-finite value {token!r} in column {col.name!r}")
    if col.kind is Kind.BINARY and x not in (0.0, 1.0):
        raise ValidationError(f"line {lineno}: binary column {col.name!r} has value {token!r}")
    return x


def load_csv(path: str | Path, schema: Schema) -> LongitudinalTable:
    """Read a CSV whose header names exactly the schema's columns.

    Columns may appear in any order in the file; the table is stored in
    schema (causal) order. ``NA`` and empty fields are missing.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file, no header") from None
        if sorted(header) != sorted(schema.names) or len(set(header)) != len(header):
            raise ValidationError(
                f"{path}: header {header} does not match schema columns {schema.names}")
        order = [header.index(name) for name in schema.names]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ValidationError(f"{path}: line {lineno} has {len(rec)} fields, expected {len(header)}")
            rows.append([_parse_cell(rec[k], col, lineno) for k, col in zip(order, schema.columns)])
    if not rows:
        raise ValidationError(f"{path}: zero data rows")
    values = np.array(rows, dtype=float)
    return LongitudinalTable(schema, values, np.isnan(values), np.ones(len(rows), dtype=np.int8))


def _fmt(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    # shortest repr round-trips exactly, never longer than 17 significant digits
    return repr(float(x))


def write_csv(table: LongitudinalTable, path: str | Path, include_origin: bool = False) -> None:
    """Write ``table``; masked cells become ``NA``. Floats keep 17 significant digits."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = (["R"] if include_origin else []) + table.schema.names
        w.writerow(header)
        for i in range(table.n_rows):
            row = [MISSING_OUT if table.mask[i, j] else _fmt(table.values[i, j])
                   for j in range(len(table.columns))]
            if include_origin:
                row.insert(0, str(int(table.origin[i])))
            w.writerow(row)


def augment(table: LongitudinalTable, regime: Regime, n_syn: int) -> LongitudinalTable:
    """Append ``n_syn`` rows with treatments set to ``regime`` and everything else missing."""
    if int(n_syn) < 1:
        raise ValidationError(f"n_syn must be >= 1, got {n_syn}")
    regime.validate(table.schema)
    n_syn = int(n_syn)
    k = len(table.columns)
    new_vals = np.full((n_syn, k), np.nan)
    new_mask = np.ones((n_syn, k), dtype=bool)
    for name, v in regime.assignments:
        j = table.schema.index(name)
        new_vals[:, j] = v
        new_mask[:, j] = False
    block_id = int(table.block.max()) + 1 if table.n_rows and table.block.max() >= 0 else 0
    return LongitudinalTable(
        table.schema,
        np.vstack([table.values, new_vals]),
        np.vstack([table.mask, new_mask]),
        np.concatenate([table.origin, np.zeros(n_syn, dtype=np.int8)]),
        np.concatenate([table.block, np.full(n_syn, block_id)]),
        table.regimes + (regime,),
    )


def missingness_pattern(table: LongitudinalTable, scope: str = "original") -> Pattern:
    """Classify the missingness of ``table``.

    Parameters
    ----------
    scope : {"original", "augmented", "all"}
        Which rows to classify. ``"original"`` ignores rows with origin 0.
    """
    if table.n_rows == 0:
        raise ValidationError("cannot classify an empty table")
    if scope == "original":
        mask = table.mask[table.origin == 1]
    elif scope == "augmented":
        mask = table.mask[table.origin == 0]
    elif scope == "all":
        mask = table.mask
    else:
        raise ValidationError(f"unknown scope {scope!r}")
    if not mask.any():
        return Pattern.COMPLETE
    # fully observed columns (e.g. set treatments in augmented rows) cannot break monotonicity
    mask = mask[:, mask.any(axis=0)]
    if np.array_equal(np.logical_or.accumulate(mask, axis=1), mask):
        return Pattern.MONOTONE
    return Pattern.NON_MONOTONE
