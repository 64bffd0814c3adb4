"""Tabular ingestion, feature engineering, splits and bootstrap attack pools.

Continuous columns are min-max scaled to [0, 1] with ranges fitted on the
training split (test values outside the range are clipped). Categorical
columns are one-hot encoded and always immutable.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = "continuous"
    levels: tuple = ()
    immutable: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            levels = tuple(str(v) for v in self.levels)
            if len(levels) < 2:
                raise SchemaError(f"categorical column {self.name!r} needs >= 2 levels")
            if len(set(levels)) != len(levels):
                raise SchemaError(f"categorical column {self.name!r} has duplicate levels")
            object.__setattr__(self, "levels", levels)
            object.__setattr__(self, "immutable", True)


@dataclass(frozen=True)
class Schema:
    columns: tuple
    label: str
    positive_label: str = "1"

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        try:
            cols = tuple(Column(c["name"], c.get("kind", "continuous"), tuple(c.get("levels", ())),
                                bool(c.get("immutable", False))) for c in doc["columns"])
            return cls(cols, doc["label"], str(doc.get("positive_label", "1")))
        except KeyError as exc:
            raise SchemaError(f"schema missing key {exc}") from None

    @classmethod
    def load(cls, path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            d = {"name": c.name, "kind": c.kind}
            if c.kind == "categorical":
                d["levels"] = list(c.levels)
            if c.immutable:
                d["immutable"] = True
            cols.append(d)
        return {"columns": cols, "label": self.label, "positive_label": self.positive_label}

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass
class RawTable:
    """Typed columns: floats for continuous, level strings for categorical."""

    schema: Schema
    columns: dict
    y: np.ndarray

    @property
    def n_rows(self) -> int:
        return int(self.y.shape[0])


def load_csv(path, schema) -> RawTable:
    """Read a headered CSV and type its columns against ``schema``."""
    if not isinstance(schema, Schema):
        schema = Schema.load(schema)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for name in schema.names + [schema.label]:
            if name not in header:
                raise DataError(f"missing column {name!r} in {path}")
        cols = {c.name: [] for c in schema.columns}
        ys = []
        errors = []
        for lineno, row in enumerate(reader, start=2):
            for c in schema.columns:
                v = (row[c.name] or "").strip()
                if c.kind == "continuous":
                    try:
                        f = float(v)
                    except ValueError:
                        errors.append(f"row {lineno}: column {c.name!r}: non-numeric value {v!r}")
                        continue
                    if not np.isfinite(f):
                        errors.append(f"row {lineno}: column {c.name!r}: non-finite value {v!r}")
                        continue
                    cols[c.name].append(f)
                else:
                    if v not in c.levels:
                        errors.append(f"row {lineno}: column {c.name!r}: unknown level {v!r}")
                        continue
                    cols[c.name].append(v)
            ys.append(1.0 if (row[schema.label] or "").strip() == schema.positive_label else 0.0)
    if errors:
        raise DataError("; ".join(errors))
    typed = {c.name: (np.array(cols[c.name], dtype=np.float64) if c.kind == "continuous"
                      else np.array(cols[c.name], dtype=object)) for c in schema.columns}
    return RawTable(schema, typed, np.array(ys, dtype=np.float64))


@dataclass
class TabularDataset:
    X: np.ndarray
    y: np.ndarray
    schema: Schema
    ranges: dict
    column_map: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return int(self.X.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.X.shape[1])

    def immutable_mask(self) -> np.ndarray:
        return immutable_mask(self)

    def subset(self, idx) -> "TabularDataset":
        return TabularDataset(self.X[idx], self.y[idx], self.schema, self.ranges, self.column_map,
                              list(self.warnings), self.name)

    def inverse_transform(self, X) -> dict:
        """Recover source-space continuous values and categorical levels."""
        X = np.asarray(X, dtype=np.float64)
        out = {}
        for c in self.schema.columns:
            cols = [j for j, (src, _) in enumerate(self.column_map) if src == c.name]
            if c.kind == "continuous":
                lo, hi = self.ranges[c.name]
                out[c.name] = X[:, cols[0]] * (hi - lo) + lo
            else:
                out[c.name] = np.array(c.levels, dtype=object)[np.argmax(X[:, cols], axis=1)]
        return out


def immutable_mask(dataset: TabularDataset) -> np.ndarray:
    """True on one-hot columns and on continuous columns flagged immutable."""
    by_name = {c.name: c for c in dataset.schema.columns}
    return np.array([by_name[src].immutable for src, _ in dataset.column_map], dtype=bool)


def _transform(raw: RawTable, rows: np.ndarray, ranges: dict) -> np.ndarray:
    parts = []
    for c in raw.schema.columns:
        v = raw.columns[c.name][rows]
        if c.kind == "continuous":
            lo, hi = ranges[c.name]
            parts.append(np.clip((v - lo) / (hi - lo), 0.0, 1.0).reshape(-1, 1))
        else:
            onehot = np.zeros((rows.size, len(c.levels)))
            for j, level in enumerate(c.levels):
                onehot[:, j] = v == level
            parts.append(onehot)
    return np.hstack(parts) if parts else np.zeros((rows.size, 0))


def _column_map(schema: Schema) -> list:
    out = []
    for c in schema.columns:
        if c.kind == "continuous":
            out.append((c.name, None))
        else:
            out.extend((c.name, level) for level in c.levels)
    return out


def stratified_split(y: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (train, test), stratified by hard label, sorted."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = stream(seed, "split")
    y = np.asarray(y)
    n_test_total = int(round(test_fraction * y.size))
    classes = np.unique(y)
    test = []
    # largest-remainder allocation so the class quotas sum to n_test_total
    counts = np.array([np.sum(y == c) for c in classes])
    exact = counts * n_test_total / y.size
    quota = np.floor(exact).astype(int)
    for j in np.argsort(-(exact - quota), kind="stable")[: n_test_total - quota.sum()]:
        quota[j] += 1
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(y == c)
        test.extend(rng.permutation(idx)[:q])
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(y.size), test)
    return train, test


def fit_transform(raw: RawTable, split_seed: int = 0, test_fraction: float = 0.2,
                  name: str = "") -> tuple[TabularDataset, TabularDataset]:
    """Split, fit min-max ranges on the training rows, encode both splits."""
    train_idx, test_idx = stratified_split(raw.y, test_fraction, split_seed)
    ranges, warns = {}, []
    for c in raw.schema.columns:
        if c.kind != "continuous":
            continue
        v = raw.columns[c.name][train_idx]
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            msg = f"column {c.name!r} has zero variance on the training split; using range ({lo}, {lo + 1})"
            log.warning(msg)
            warns.append(msg)
            hi = lo + 1.0
        ranges[c.name] = (lo, hi)
    cmap = _column_map(raw.schema)
    train = TabularDataset(_transform(raw, train_idx, ranges), raw.y[train_idx], raw.schema, ranges, cmap,
                           warns, name)
    test = TabularDataset(_transform(raw, test_idx, ranges), raw.y[test_idx], raw.schema, ranges, cmap,
                          list(warns), name)
    return train, test


@dataclass(frozen=True)
class AttackPool:
    subsets: tuple
    size: int
    count: int
    seed: int

    def __len__(self):
        return self.count


def bootstrap(test: TabularDataset | int, count: int, size: int, seed: int) -> AttackPool:
    """``count`` with-replacement index samples of ``size`` rows from the test split."""
    n = test if isinstance(test, int) else len(test)
    if n == 0:
        raise DataError("cannot bootstrap an empty test set")
    if count < 1 or size < 1:
        raise ValueError("bootstrap count and size must be >= 1")
    subsets = tuple(stream(seed, "bootstrap", b).integers(0, n, size=size) for b in range(count))
    return AttackPool(subsets, size, count, seed)


# ---------------------------------------------------------------------------
# built-in datasets


def cancer_raw() -> RawTable:
    """UCI Wisconsin diagnostic breast cancer (569 rows, 30 continuous features).

    Malignant tumours are the positive class (y = 1).
    """
    from sklearn.datasets import load_breast_cancer

    data = load_breast_cancer()
    names = [str(n).replace(" ", "_") for n in data.feature_names]
    schema = Schema(tuple(Column(n) for n in names), "malignant", "1")
    cols = {n: data.data[:, j].astype(np.float64) for j, n in enumerate(names)}
    return RawTable(schema, cols, (data.target == 0).astype(np.float64))


def blobs_raw(n: int = 500, seed: int = 0, separation: float = 3.0, std: float = 1.0) -> RawTable:
    """Two isotropic 2-D Gaussian blobs, centred at -/+ separation/2 on the diagonal."""
    rng = stream(seed, "blobs")
    y = np.repeat([0.0, 1.0], [n // 2, n - n // 2])
    centre = separation / (2 * np.sqrt(2))
    X = rng.normal(scale=std, size=(n, 2)) + np.where(y[:, None] > 0, centre, -centre)
    schema = Schema((Column("x1"), Column("x2")), "y", "1")
    return RawTable(schema, {"x1": X[:, 0], "x2": X[:, 1]}, y)


def load_builtin(name: str, seed: int = 0, **kwargs) -> RawTable:
    if name == "cancer":
        return cancer_raw()
    if name == "blobs":
        return blobs_raw(seed=seed, **kwargs)
    raise DataError(f"unknown built-in dataset {name!r}")


def sample_rows(dataset: TabularDataset, n: int, seed: int, *purpose) -> np.ndarray:
    """Uniform row indices without replacement (with replacement if n > len)."""
    rng = stream(seed, "sample_rows", *purpose)
    return rng.choice(len(dataset), size=n, replace=n > len(dataset))

