"""Table schema, CSV ingestion, standardization/one-hot encoding, stratified subsampling."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

INPUT_COLUMNS = (
    "Tout_cooling_water", "Tin_H2", "Tin_Air", "Pin_Air", "Pin_H2",
    "Qin_Air", "Qin_H2", "RHin_Air", "RHin_H2", "Q_cooling_water",
)
N_CELLS = 40
STEP_CLASSES = ("stabilization", "polarization")
DAY_CLASSES = ("1", "2", "3", "4", "5")


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class MissingColumnError(SchemaError):
    pass


class DuplicateColumnError(SchemaError):
    pass


class EmptyFileError(DataError):
    pass


class ZeroVarianceError(DataError):
    pass


class UnknownCategoryError(DataError):
    pass


class RangeViolationError(DataError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    unit: str = ""
    lo: float | None = None
    hi: float | None = None
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind == "continuous":
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise SchemaError(f"column {self.name}: need lo < hi, got [{self.lo}, {self.hi}]")
        elif self.kind == "categorical":
            object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
            if not self.classes or len(set(self.classes)) != len(self.classes):
                raise SchemaError(f"column {self.name}: class list must be non-empty and unique")
        else:
            raise SchemaError(f"column {self.name}: unknown kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "continuous":
            return {"name": self.name, "kind": self.kind, "unit": self.unit,
                    "range": [self.lo, self.hi]}
        return {"name": self.name, "kind": self.kind, "unit": self.unit,
                "classes": list(self.classes)}

    @classmethod
    def from_dict(cls, d: dict) -> ColumnSpec:
        if d.get("kind") == "continuous":
            lo, hi = d["range"]
            return cls(d["name"], "continuous", d.get("unit", ""), float(lo), float(hi))
        return cls(d["name"], d.get("kind", ""), d.get("unit", ""), classes=tuple(d.get("classes", ())))


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise SchemaError(f"duplicate column names in schema: {sorted(dup)}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def continuous(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == "continuous"]

    @property
    def categorical(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == "categorical"]

    @property
    def continuous_names(self) -> list[str]:
        return [c.name for c in self.continuous]

    @property
    def d(self) -> int:
        return len(self.continuous)

    @property
    def class_counts(self) -> tuple[int, ...]:
        return tuple(len(c.classes) for c in self.categorical)

    @property
    def encoded_width(self) -> int:
        return self.d + sum(self.class_counts)

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise MissingColumnError(f"unknown column {name!r}")

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> TableSchema:
        return cls(tuple(ColumnSpec.from_dict(c) for c in d["columns"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> TableSchema:
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> TableSchema:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()


def default_schema(categoricals: bool = True) -> TableSchema:
    """The 52 bench measurements plus the ``day`` and ``step`` labels."""
    cols = [
        ColumnSpec("Tout_cooling_water", "continuous", "degC", 25.0, 95.0),
        ColumnSpec("Tin_H2", "continuous", "degC", 25.0, 95.0),
        ColumnSpec("Tin_Air", "continuous", "degC", 25.0, 95.0),
        ColumnSpec("Pin_Air", "continuous", "mbarg", 0.0, 1000.0),
        ColumnSpec("Pin_H2", "continuous", "mbarg", 0.0, 1000.0),
        ColumnSpec("Qin_Air", "continuous", "Nl/min", 0.0, 300.0),
        ColumnSpec("Qin_H2", "continuous", "Nl/min", 0.0, 100.0),
        ColumnSpec("RHin_Air", "continuous", "%", 0.0, 100.0),
        ColumnSpec("RHin_H2", "continuous", "%", 0.0, 100.0),
        ColumnSpec("Q_cooling_water", "continuous", "l/min", 0.0, 15.0),
        ColumnSpec("V_stack", "continuous", "V", 0.0, 40.0),
        ColumnSpec("I_load", "continuous", "A", 0.0, 200.0),
    ]
    cols += [ColumnSpec(f"Vcell_{i}", "continuous", "V", 0.0, 1.0) for i in range(1, N_CELLS + 1)]
    if categoricals:
        cols += [ColumnSpec("day", "categorical", classes=DAY_CLASSES),
                 ColumnSpec("step", "categorical", classes=STEP_CLASSES)]
    return TableSchema(tuple(cols))


@dataclass(frozen=True)
class RangeViolation:
    row: int
    column: str
    value: float
    violation: str

    def to_dict(self) -> dict:
        return {"row": self.row, "column": self.column, "value": self.value,
                "violation": self.violation}


@dataclass
class ValidationReport:
    violations: list[RangeViolation] = field(default_factory=list)
    rejected: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.rejected

    def to_jsonl(self) -> str:
        lines = [json.dumps(v.to_dict()) for v in self.violations]
        lines += [json.dumps(r) for r in self.rejected]
        return "".join(line + "\n" for line in lines)


@dataclass
class Dataset:
    """Rows in physical units: a float block plus integer class codes."""

    schema: TableSchema
    continuous: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        self.continuous = np.asarray(self.continuous, dtype=np.float64).reshape(-1, self.schema.d)
        n = self.continuous.shape[0]
        n_cat = len(self.schema.categorical)
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(n, n_cat)

    @property
    def n_rows(self) -> int:
        return self.continuous.shape[0]

    def __len__(self) -> int:
        return self.n_rows

    def column(self, name: str) -> np.ndarray:
        spec = self.schema.column(name)
        if spec.kind == "continuous":
            return self.continuous[:, self.schema.continuous_names.index(name)]
        j = [c.name for c in self.schema.categorical].index(name)
        return self.codes[:, j]

    def labels(self, name: str) -> np.ndarray:
        spec = self.schema.column(name)
        return np.asarray(spec.classes, dtype=object)[self.column(name)]

    def take(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.schema, self.continuous[idx], self.codes[idx])

    def select(self, names: Sequence[str]) -> np.ndarray:
        cn = self.schema.continuous_names
        return self.continuous[:, [cn.index(n) for n in names]]

    def validate(self) -> ValidationReport:
        report = ValidationReport()
        for j, spec in enumerate(self.schema.continuous):
            col = self.continuous[:, j]
            for i in np.flatnonzero((col < spec.lo) | (col > spec.hi)):
                report.violations.append(RangeViolation(
                    int(i), spec.name, float(col[i]), f"outside [{spec.lo:g}, {spec.hi:g}]"))
        return report


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(ds: Dataset, path) -> None:
    schema = ds.schema
    cont = schema.continuous_names
    cats = schema.categorical
    col_pos = {}
    for name in schema.names:
        spec = schema.column(name)
        col_pos[name] = ("c", cont.index(name)) if spec.kind == "continuous" else \
            ("k", [c.name for c in cats].index(name))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(schema.names) + "\n")
        for i in range(ds.n_rows):
            cells = []
            for name in schema.names:
                kind, j = col_pos[name]
                if kind == "c":
                    cells.append(_fmt(ds.continuous[i, j]))
                else:
                    cells.append(cats[j].classes[ds.codes[i, j]])
            fh.write(",".join(cells) + "\n")


def load_csv(schema: TableSchema, path, strict: bool = False) -> tuple[Dataset, ValidationReport]:
    """Parse a header-first CSV against ``schema``.

    Rows with unparseable cells or unknown categories are dropped and listed
    in the report; out-of-range values are kept and reported (or raise
    :class:`RangeViolationError` when ``strict``).
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFileError(f"{path}: empty file")
        header = [h.strip() for h in header]
        dup = sorted({h for h in header if header.count(h) > 1})
        if dup:
            raise DuplicateColumnError(f"{path}: duplicate column(s) {dup}")
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {missing}")
        extra = [h for h in header if h not in schema.names]
        if extra:
            log.warning("%s: ignoring columns not in schema: %s", path, extra)
        pos = {h: i for i, h in enumerate(header)}
        cont = [(pos[c.name], c) for c in schema.continuous]
        cats = [(pos[c.name], {cls: k for k, cls in enumerate(c.classes)}, c)
                for c in schema.categorical]
        rows_c: list[list[float]] = []
        rows_k: list[list[int]] = []
        report = ValidationReport()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                report.rejected.append({"line": lineno, "column": None, "value": None,
                                        "violation": f"expected {len(header)} cells, got {len(row)}"})
                continue
            vals, codes, bad = [], [], None
            for i, spec in cont:
                try:
                    v = float(row[i])
                except ValueError:
                    bad = (spec.name, row[i], "unparseable number")
                    break
                if not math.isfinite(v):
                    bad = (spec.name, row[i], "non-finite number")
                    break
                vals.append(v)
            if bad is None:
                for i, mapping, spec in cats:
                    cell = row[i].strip()
                    if cell not in mapping:
                        bad = (spec.name, cell, "unknown category")
                        break
                    codes.append(mapping[cell])
            if bad is not None:
                report.rejected.append({"line": lineno, "column": bad[0], "value": bad[1],
                                        "violation": bad[2]})
                continue
            rows_c.append(vals)
            rows_k.append(codes)
    if report.rejected:
        log.warning("%s: rejected %d row(s)", path, len(report.rejected))
    ds = Dataset(schema, np.array(rows_c, dtype=np.float64).reshape(-1, schema.d),
                 np.array(rows_k, dtype=np.int64).reshape(-1, len(schema.categorical)))
    # violation rows index the parsed dataset, rejected entries carry file lines
    report.violations.extend(ds.validate().violations)
    if report.violations:
        if strict:
            first = report.violations[0]
            raise RangeViolationError(
                f"{path}: {len(report.violations)} out-of-range value(s), first: row {first.row} "
                f"{first.column}={first.value} {first.violation}")
        log.warning("%s: %d out-of-range value(s)", path, len(report.violations))
    return ds, report


@dataclass
class Encoder:
    """Per-column z-score statistics plus one-hot layout for categoricals."""

    schema: TableSchema
    mean: np.ndarray
    std: np.ndarray

    @property
    def width(self) -> int:
        return self.schema.encoded_width

    def blocks(self) -> list[tuple[int, int]]:
        out, start = [], self.schema.d
        for k in self.schema.class_counts:
            out.append((start, start + k))
            start += k
        return out

    def encode(self, ds: Dataset) -> np.ndarray:
        if ds.schema.names != self.schema.names:
            raise SchemaError("dataset schema does not match the encoder schema")
        n = ds.n_rows
        out = np.zeros((n, self.width))
        out[:, :self.schema.d] = (ds.continuous - self.mean) / self.std
        for j, ((a, b), k) in enumerate(zip(self.blocks(), self.schema.class_counts)):
            codes = ds.codes[:, j]
            if n and (codes.min() < 0 or codes.max() >= k):
                raise UnknownCategoryError(
                    f"column {self.schema.categorical[j].name}: code outside 0..{k - 1}")
            out[np.arange(n), a + codes] = 1.0
        return out

    def decode(self, m: np.ndarray) -> Dataset:
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != self.width:
            raise SchemaError(f"encoded matrix must have width {self.width}, got {m.shape}")
        cont = m[:, :self.schema.d] * self.std + self.mean
        codes = np.zeros((m.shape[0], len(self.schema.categorical)), dtype=np.int64)
        for j, (a, b) in enumerate(self.blocks()):
            codes[:, j] = np.argmax(m[:, a:b], axis=1)
        return Dataset(self.schema, cont, codes)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "columns": self.schema.continuous_names,
                "categories": {c.name: list(c.classes) for c in self.schema.categorical}}

    @classmethod
    def from_dict(cls, d: dict, schema: TableSchema) -> Encoder:
        return cls(schema, np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_encoder(ds: Dataset) -> Encoder:
    if ds.n_rows < 2:
        raise DataError(f"need at least 2 rows to fit an encoder, got {ds.n_rows}")
    mean = ds.continuous.mean(axis=0)
    std = ds.continuous.std(axis=0)
    const = [name for name, lo, hi in zip(ds.schema.continuous_names,
                                          ds.continuous.min(axis=0), ds.continuous.max(axis=0))
             if lo == hi]
    if const:
        raise ZeroVarianceError(f"constant column(s) cannot be standardized: {const}")
    return Encoder(ds.schema, mean, std)


def subsample(ds: Dataset, f: float, stratify: str | None = "step", seed: int = 0) -> Dataset:
    """Uniform stratified subsample keeping ``floor(f * n)`` rows.

    Each stratum first keeps ``ceil(f * n_s)`` rows; the surplus over the
    total is trimmed one row at a time from the stratum that overshoots its
    exact share ``f * n_s`` the most (larger stratum first on ties).
    Selected rows keep their original order.
    """
    if not 0.0 < f <= 1.0:
        raise DataError(f"subsampling fraction must lie in (0, 1], got {f}")
    n = ds.n_rows
    total = max(1, math.floor(f * n + 1e-9)) if n else 0
    rng = np.random.default_rng(seed)
    if stratify is None:
        strata = [np.arange(n)]
    else:
        if stratify not in [c.name for c in ds.schema.categorical]:
            raise SchemaError(f"unknown stratify column {stratify!r}")
        col = ds.column(stratify)
        strata = [np.flatnonzero(col == k) for k in range(len(ds.schema.column(stratify).classes))]
    counts = [math.ceil(f * len(s) - 1e-9) for s in strata]
    surplus = sum(counts) - total
    while surplus > 0:
        j = max(range(len(counts)),
                key=lambda i: (counts[i] - f * len(strata[i]), len(strata[i]), -i))
        counts[j] -= 1
        surplus -= 1
    picked = [rng.permutation(s)[:c] for s, c in zip(strata, counts)]
    idx = np.sort(np.concatenate(picked)) if picked else np.arange(0)
    return ds.take(idx)


def concat_datasets(parts: Iterable[Dataset]) -> Dataset:
    parts = list(parts)
    return Dataset(parts[0].schema, np.concatenate([p.continuous for p in parts]),
                   np.concatenate([p.codes for p in parts]))
