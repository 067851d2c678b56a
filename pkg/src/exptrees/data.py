"""Categorical datasets with missing values: schemas, discretization, MCAR
masking, and CSV round-trips.

Feature values are small category indices. A missing slot is ``None`` in
row-level APIs and ``MISSING_CODE`` (-1) in the packed integer matrix. The
target is a float; a missing target is NaN internally and an empty CSV field
on disk.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MISSING_CODE = -1

SCHEMA_FORMAT = "feature-schema/1"
BINNING_FORMAT = "binning-spec/1"

MAX_BINS = 10


class CsvFormatError(ValueError):
    """Malformed tabular input: bad arity, unparseable cell, unknown column."""


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with their category counts, plus the target name."""

    features: tuple[tuple[str, int], ...]
    target_name: str

    def __post_init__(self):
        object.__setattr__(
            self, "features", tuple((str(n), int(c)) for n, c in self.features)
        )
        names = [n for n, _ in self.features]
        if not names:
            raise ValueError("schema needs at least one feature")
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        for name, card in self.features:
            if card < 2:
                raise ValueError(f"feature {name!r} needs cardinality >= 2, got {card}")
        if self.target_name in names:
            raise ValueError(f"target {self.target_name!r} collides with a feature name")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.features)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.features)

    @property
    def n_features(self) -> int:
        return len(self.features)

    def index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.features):
            if n == name:
                return i
        raise KeyError(f"unknown feature {name!r}")

    def to_dict(self) -> dict:
        return {
            "format": SCHEMA_FORMAT,
            "features": [[n, c] for n, c in self.features],
            "target": self.target_name,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSchema":
        if obj.get("format") != SCHEMA_FORMAT:
            raise ValueError(f"expected format {SCHEMA_FORMAT!r}, got {obj.get('format')!r}")
        return cls(tuple((n, c) for n, c in obj["features"]), obj["target"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of (partial feature assignment, target) under one schema.

    ``x`` is an (n, F) int16 matrix with -1 for missing slots, ``y`` an
    (n,) float64 vector with NaN for missing targets. Both arrays are
    read-only after construction.
    """

    schema: FeatureSchema
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.int16)
        y = np.array(self.y, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.schema.n_features:
            raise ValueError("x must be (n_rows, n_features)")
        if y.shape != (x.shape[0],):
            raise ValueError("y must have one entry per row")
        cards = np.asarray(self.schema.cardinalities)
        if np.any(x < MISSING_CODE) or np.any(x >= cards[None, :]):
            raise ValueError("feature value out of range for its cardinality")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_rows(cls, schema: FeatureSchema, rows) -> "Dataset":
        """Build from [(assignment, target)] where the assignment is a
        per-feature sequence of category index or None and the target is a
        float or None."""
        n = len(rows)
        x = np.full((n, schema.n_features), MISSING_CODE, dtype=np.int16)
        y = np.full(n, np.nan)
        for i, (assignment, target) in enumerate(rows):
            if len(assignment) != schema.n_features:
                raise ValueError(f"row {i}: expected {schema.n_features} features")
            for f, v in enumerate(assignment):
                if v is not None:
                    x[i, f] = v
            if target is not None:
                y[i] = target
        return cls(schema, x, y)

    def rows(self) -> list[tuple[tuple, float | None]]:
        out = []
        for i in range(len(self)):
            assignment = tuple(
                None if v == MISSING_CODE else int(v) for v in self.x[i]
            )
            target = None if np.isnan(self.y[i]) else float(self.y[i])
            out.append((assignment, target))
        return out

    def complete_mask(self) -> np.ndarray:
        """Boolean mask of rows with every feature observed."""
        return np.all(self.x != MISSING_CODE, axis=1)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y, equal_nan=True)
        )


@dataclass(frozen=True)
class RawTable:
    """Header plus string cells straight from a CSV; empty cells are None."""

    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def column(self, name: str) -> list:
        try:
            i = self.columns.index(name)
        except ValueError:
            raise CsvFormatError(f"unknown column {name!r}") from None
        return [r[i] for r in self.rows]


@dataclass(frozen=True)
class ColumnBinning:
    """How one raw column maps to category indices.

    Continuous columns carry cut points (value <= cut falls in the lower
    bin, so bins are closed on the right); categorical columns carry their
    ordered level list.
    """

    name: str
    cardinality: int
    cuts: tuple[float, ...] | None = None
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if (self.cuts is None) == (self.levels is None):
            raise ValueError("exactly one of cuts/levels must be set")
        if self.cuts is not None:
            cuts = tuple(float(c) for c in self.cuts)
            if any(a >= b for a, b in zip(cuts, cuts[1:])):
                raise ValueError(f"column {self.name!r}: cuts must be strictly increasing")
            if len(cuts) + 1 > MAX_BINS:
                raise ValueError(f"column {self.name!r}: more than {MAX_BINS} bins")
            object.__setattr__(self, "cuts", cuts)
        else:
            object.__setattr__(self, "levels", tuple(self.levels))

    def encode(self, cell, row_no: int):
        if cell is None:
            return None
        if self.cuts is not None:
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(
                    f"row {row_no}: column {self.name!r}: non-numeric value {cell!r}"
                ) from None
            return int(np.digitize(v, self.cuts, right=True))
        try:
            return self.levels.index(str(cell))
        except ValueError:
            raise CsvFormatError(
                f"row {row_no}: column {self.name!r}: unseen category {cell!r}"
            ) from None


@dataclass(frozen=True)
class BinningSpec:
    """Per-column encodings fixed on the training table, reapplied verbatim
    to test tables so both land in the same category space."""

    columns: tuple[ColumnBinning, ...]
    target_name: str

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            tuple((c.name, c.cardinality) for c in self.columns), self.target_name
        )

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            entry = {"name": c.name, "cardinality": c.cardinality}
            if c.cuts is not None:
                entry["cuts"] = list(c.cuts)
            else:
                entry["levels"] = list(c.levels)
            cols.append(entry)
        return {"format": BINNING_FORMAT, "columns": cols, "target": self.target_name}

    @classmethod
    def from_dict(cls, obj: dict) -> "BinningSpec":
        if obj.get("format") != BINNING_FORMAT:
            raise ValueError(f"expected format {BINNING_FORMAT!r}, got {obj.get('format')!r}")
        cols = tuple(
            ColumnBinning(
                name=c["name"],
                cardinality=c["cardinality"],
                cuts=tuple(c["cuts"]) if "cuts" in c else None,
                levels=tuple(c["levels"]) if "levels" in c else None,
            )
            for c in obj["columns"]
        )
        return cls(cols, obj["target"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BinningSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _is_numeric_column(observed: list) -> bool:
    try:
        for cell in observed:
            float(cell)
    except ValueError:
        return False
    return True


def discretize(raw: RawTable, target_name: str, max_bins: int = MAX_BINS) -> tuple[Dataset, BinningSpec]:
    """Map a raw table to category indices, equal-width binning the numeric
    columns and dense-indexing the rest.

    Cuts for a numeric column are lo + i*(hi - lo)/max_bins over the observed
    range; a value equal to a cut falls in the lower bin. A constant numeric
    column gets a single bin but cardinality 2 (the second category is never
    produced; downstream code only needs cardinality >= 2). Categorical levels
    are indexed in sorted order. Missing cells stay missing. Returns the
    binning so later tables are encoded identically.
    """
    if not 2 <= max_bins <= MAX_BINS:
        raise ValueError(f"max_bins must be in [2, {MAX_BINS}]")
    if not raw.rows:
        raise CsvFormatError("empty table")
    if target_name not in raw.columns:
        raise CsvFormatError(f"unknown column {target_name!r}")

    bindings = []
    for name in raw.columns:
        if name == target_name:
            continue
        cells = raw.column(name)
        observed = [c for c in cells if c is not None]
        if not observed:
            raise ValueError(f"column {name!r} fully missing")
        if _is_numeric_column(observed):
            values = np.array([float(c) for c in observed])
            lo, hi = float(values.min()), float(values.max())
            if lo == hi:
                bindings.append(ColumnBinning(name, 2, cuts=()))
            else:
                cuts = tuple(lo + i * (hi - lo) / max_bins for i in range(1, max_bins))
                bindings.append(ColumnBinning(name, max_bins, cuts=cuts))
        else:
            levels = tuple(sorted({str(c) for c in observed}))
            card = max(len(levels), 2)
            bindings.append(ColumnBinning(name, card, levels=levels))
    spec = BinningSpec(tuple(bindings), target_name)
    return apply_binning(raw, spec), spec


def apply_binning(raw: RawTable, spec: BinningSpec) -> Dataset:
    """Encode a raw table with a previously computed BinningSpec."""
    schema = spec.schema()
    col_idx = {}
    for c in spec.columns:
        if c.name not in raw.columns:
            raise CsvFormatError(f"missing column {c.name!r}")
        col_idx[c.name] = raw.columns.index(c.name)
    if spec.target_name not in raw.columns:
        raise CsvFormatError(f"missing column {spec.target_name!r}")
    t_idx = raw.columns.index(spec.target_name)

    n = len(raw.rows)
    x = np.full((n, schema.n_features), MISSING_CODE, dtype=np.int16)
    y = np.full(n, np.nan)
    for i, row in enumerate(raw.rows):
        row_no = i + 1
        for f, c in enumerate(spec.columns):
            code = c.encode(row[col_idx[c.name]], row_no)
            if code is not None:
                x[i, f] = code
        cell = row[t_idx]
        if cell is not None:
            try:
                y[i] = float(cell)
            except ValueError:
                raise CsvFormatError(f"row {row_no}: non-numeric target {cell!r}") from None
    return Dataset(schema, x, y)


def inject_mcar(ds: Dataset, pi: float, seed: int) -> Dataset:
    """Mask each feature slot independently with probability pi.

    Targets are never masked. The same seed reproduces the same mask
    bit-for-bit; the input dataset is untouched.
    """
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must be in [0, 1], got {pi}")
    rng = np.random.default_rng(seed)
    mask = rng.random(ds.x.shape) < pi
    x = np.where(mask, MISSING_CODE, ds.x)
    return Dataset(ds.schema, x, ds.y.copy())


def load_csv(path, schema: FeatureSchema | None = None):
    """Read a CSV with a header row. With a schema, returns a Dataset of
    category indices (empty field = missing); without, returns a RawTable.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file: header row required") from None
        data = list(reader)

    for i, row in enumerate(data):
        if len(row) != len(header):
            raise CsvFormatError(
                f"row {i + 1}: expected {len(header)} fields, got {len(row)}"
            )

    if schema is None:
        rows = tuple(tuple(cell if cell != "" else None for cell in row) for row in data)
        return RawTable(tuple(header), rows)

    expected = set(schema.names) | {schema.target_name}
    if set(header) != expected:
        raise CsvFormatError(
            f"header mismatch: expected columns {sorted(expected)}, got {header}"
        )
    positions = [header.index(name) for name in schema.names]
    t_pos = header.index(schema.target_name)

    n = len(data)
    x = np.full((n, schema.n_features), MISSING_CODE, dtype=np.int16)
    y = np.full(n, np.nan)
    for i, row in enumerate(data):
        row_no = i + 1
        for f, pos in enumerate(positions):
            cell = row[pos]
            if cell == "":
                continue
            try:
                v = int(cell)
            except ValueError:
                raise CsvFormatError(
                    f"row {row_no}: column {schema.names[f]!r}: "
                    f"expected integer category, got {cell!r}"
                ) from None
            if not 0 <= v < schema.cardinalities[f]:
                raise CsvFormatError(
                    f"row {row_no}: column {schema.names[f]!r}: "
                    f"category {v} out of range"
                )
            x[i, f] = v
        cell = row[t_pos]
        if cell != "":
            try:
                y[i] = float(cell)
            except ValueError:
                raise CsvFormatError(
                    f"row {row_no}: non-numeric target {cell!r}"
                ) from None
    return Dataset(schema, x, y)


def save_csv(ds: Dataset, path) -> None:
    """Write a Dataset as CSV; missing cells become empty fields. Loading the
    file back with the same schema reproduces the dataset exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(ds.schema.names) + [ds.schema.target_name])
        for i in range(len(ds)):
            row = [
                "" if v == MISSING_CODE else str(int(v)) for v in ds.x[i]
            ]
            row.append("" if np.isnan(ds.y[i]) else repr(float(ds.y[i])))
            writer.writerow(row)


def drop_missing_targets(ds: Dataset, context: str = "fit") -> tuple[Dataset, int]:
    """Remove rows whose target is missing, warning with the count."""
    keep = ~np.isnan(ds.y)
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"{context}: dropped {dropped} rows with missing target")
        return Dataset(ds.schema, ds.x[keep], ds.y[keep]), dropped
    return ds, 0
