"""Tabular data handling: schemas, validated datasets, preprocessing, splits.

A Dataset stores features as a float matrix; categorical columns hold the
integer index of the level within the declared level list. Arrays are
frozen after construction, so datasets are safe to share between threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ConstantColumnError,
    DataError,
    MissingInputError,
    MissingValueError,
    NonNumericCellError,
    SchemaError,
    UnknownLevelError,
)

KINDS = ("continuous", "categorical")
ROLES = ("feature", "response", "exposure", "ignore")


@dataclass(frozen=True)
class ColumnSchema:
    """Declaration of one CSV column: its name, type, and modeling role."""

    name: str
    kind: str = "continuous"
    role: str = "feature"
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column '{self.name}': unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"column '{self.name}': unknown role {self.role!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise SchemaError(f"column '{self.name}': categorical columns need levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"column '{self.name}': duplicate levels")
            object.__setattr__(self, "levels", tuple(self.levels))
        elif self.levels is not None:
            raise SchemaError(f"column '{self.name}': continuous columns take no levels")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.levels is not None:
            d["levels"] = list(self.levels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ColumnSchema":
        return ColumnSchema(
            name=d["name"],
            kind=d.get("kind", "continuous"),
            role=d.get("role", "feature"),
            levels=tuple(d["levels"]) if "levels" in d else None,
        )


def validate_schema(columns: list[ColumnSchema]) -> None:
    names = [c.name for c in columns]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate column names in schema")
    n_resp = sum(1 for c in columns if c.role == "response")
    if n_resp != 1:
        raise SchemaError(f"schema must declare exactly one response column, found {n_resp}")
    n_expo = sum(1 for c in columns if c.role == "exposure")
    if n_expo > 1:
        raise SchemaError("schema may declare at most one exposure column")


def load_schema_json(path: str | Path) -> list[ColumnSchema]:
    """Read a schema file: {"columns": [{name, kind, role, levels?}, ...]}."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"schema file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "columns" not in doc:
        raise SchemaError(f"schema file {path} must contain a 'columns' list")
    columns = [ColumnSchema.from_dict(c) for c in doc["columns"]]
    validate_schema(columns)
    return columns


def save_schema_json(columns: list[ColumnSchema], path: str | Path) -> None:
    doc = {"columns": [c.to_dict() for c in columns]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


class Dataset:
    """Validated observations: feature matrix, response, optional exposure.

    Categorical feature cells are stored as float level indices. Instances
    are immutable; all mutating transforms return new datasets.
    """

    def __init__(self, schema, x, y, exposure=None):
        schema = list(schema)
        validate_schema(schema)
        self.schema = tuple(schema)
        self.feature_columns = tuple(c for c in schema if c.role == "feature")
        self.feature_names = tuple(c.name for c in self.feature_columns)
        x = np.ascontiguousarray(np.asarray(x, dtype=float))
        y = np.ascontiguousarray(np.asarray(y, dtype=float))
        if x.ndim != 2:
            raise DataError("feature matrix must be 2-dimensional")
        if x.shape[1] != len(self.feature_columns):
            raise DataError(
                f"feature matrix has {x.shape[1]} columns, schema declares "
                f"{len(self.feature_columns)} features"
            )
        if y.shape != (x.shape[0],):
            raise DataError("response vector length does not match feature matrix")
        if not np.all(np.isfinite(x)):
            raise DataError("feature matrix contains non-finite values")
        if not np.all(np.isfinite(y)):
            raise DataError("response contains non-finite values")
        for j, col in enumerate(self.feature_columns):
            if col.kind == "categorical":
                codes = x[:, j]
                if np.any(codes != np.round(codes)) or np.any(codes < 0) or np.any(
                    codes >= len(col.levels)
                ):
                    raise DataError(f"column '{col.name}': level index out of range")
        if exposure is not None:
            exposure = np.ascontiguousarray(np.asarray(exposure, dtype=float))
            if exposure.shape != (x.shape[0],):
                raise DataError("exposure vector length does not match feature matrix")
            if not np.all(np.isfinite(exposure)) or np.any(exposure <= 0.0):
                raise DataError("exposure values must be finite and strictly positive")
            exposure.flags.writeable = False
        x.flags.writeable = False
        y.flags.writeable = False
        self.x = x
        self.y = y
        self.exposure = exposure

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise DataError(f"unknown feature '{name}'") from None

    def column(self, name: str) -> np.ndarray:
        return self.x[:, self.feature_index(name)]

    def take(self, idx) -> "Dataset":
        expo = self.exposure[idx] if self.exposure is not None else None
        return Dataset(self.schema, self.x[idx], self.y[idx], expo)

    def to_csv(self, path: str | Path) -> None:
        """Write rows in schema order with categorical codes expanded to labels."""
        cols = [c for c in self.schema if c.role != "ignore"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([c.name for c in cols])
            feat_idx = {c.name: j for j, c in enumerate(self.feature_columns)}
            for i in range(self.n):
                row = []
                for c in cols:
                    if c.role == "response":
                        row.append(repr(float(self.y[i])))
                    elif c.role == "exposure":
                        row.append(repr(float(self.exposure[i])))
                    elif c.kind == "categorical":
                        row.append(c.levels[int(self.x[i, feat_idx[c.name]])])
                    else:
                        row.append(repr(float(self.x[i, feat_idx[c.name]])))
                writer.writerow(row)


def load_csv(path: str | Path, schema: list[ColumnSchema]) -> Dataset:
    """Load and validate a comma-separated file against a declared schema.

    The header must contain every non-ignored schema column; extra file
    columns are rejected unless declared (possibly with role 'ignore').
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"data file not found: {path}")
    validate_schema(list(schema))
    by_name = {c.name: c for c in schema}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        unknown = [h for h in header if h not in by_name]
        if unknown:
            raise SchemaError(f"{path}: header columns not in schema: {unknown}")
        needed = [c.name for c in schema if c.role != "ignore"]
        missing = [n for n in needed if n not in header]
        if missing:
            raise SchemaError(f"{path}: schema columns missing from header: {missing}")

        feature_cols = [c for c in schema if c.role == "feature"]
        pos = {name: header.index(name) for name in header}
        response_col = next(c for c in schema if c.role == "response")
        exposure_col = next((c for c in schema if c.role == "exposure"), None)

        x_rows, y_vals, e_vals = [], [], []
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")

            def cell(col: ColumnSchema) -> float:
                raw = row[pos[col.name]].strip()
                if raw == "":
                    raise MissingValueError(i, col.name)
                if col.kind == "categorical":
                    try:
                        return float(col.levels.index(raw))
                    except ValueError:
                        raise UnknownLevelError(i, col.name, raw, col.levels) from None
                try:
                    return float(raw)
                except ValueError:
                    raise NonNumericCellError(i, col.name, raw) from None

            x_rows.append([cell(c) for c in feature_cols])
            y_vals.append(cell(response_col))
            if exposure_col is not None:
                e_vals.append(cell(exposure_col))

    x = np.asarray(x_rows, dtype=float).reshape(len(x_rows), len(feature_cols))
    y = np.asarray(y_vals, dtype=float)
    exposure = np.asarray(e_vals, dtype=float) if exposure_col is not None else None
    return Dataset(schema, x, y, exposure)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessReport:
    """Statistics captured while preprocessing a training set.

    Means and standard deviations (sample sd, divisor n-1) are stored per
    continuous column so validation and test data can be transformed with
    training statistics via apply_preprocess.
    """

    standardize: bool = False
    one_hot: bool = False
    iqr_filter: bool = False
    sd_divisor: str = "n-1"
    removed_rows: int = 0
    response_bounds: tuple[float, float] | None = None
    column_stats: dict = field(default_factory=dict)  # name -> (mean, sd)

    def to_dict(self) -> dict:
        return {
            "standardize": self.standardize,
            "one_hot": self.one_hot,
            "iqr_filter": self.iqr_filter,
            "sd_divisor": self.sd_divisor,
            "removed_rows": self.removed_rows,
            "response_bounds": list(self.response_bounds) if self.response_bounds else None,
            "column_stats": {k: [float(m), float(s)] for k, (m, s) in self.column_stats.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "PreprocessReport":
        rep = PreprocessReport(
            standardize=d["standardize"],
            one_hot=d["one_hot"],
            iqr_filter=d["iqr_filter"],
            sd_divisor=d.get("sd_divisor", "n-1"),
            removed_rows=d.get("removed_rows", 0),
            response_bounds=tuple(d["response_bounds"]) if d.get("response_bounds") else None,
        )
        rep.column_stats = {k: (float(v[0]), float(v[1])) for k, v in d["column_stats"].items()}
        return rep


def _iqr_bounds(y: np.ndarray) -> tuple[float, float]:
    q1, q3 = np.quantile(y, [0.25, 0.75])
    iqr = q3 - q1
    return float(q1 - 1.5 * iqr), float(q3 + 1.5 * iqr)


def _one_hot_schema(column: ColumnSchema) -> list[ColumnSchema]:
    return [
        ColumnSchema(name=f"{column.name}={lvl}", kind="continuous", role="feature")
        for lvl in column.levels
    ]


def preprocess(
    ds: Dataset,
    standardize: bool = True,
    one_hot: bool = True,
    iqr_filter: bool = False,
) -> tuple[Dataset, PreprocessReport]:
    """Standardize continuous features, expand categoricals, filter outliers.

    IQR filtering drops rows whose response lies outside
    [Q1 - 1.5*IQR, Q3 + 1.5*IQR]; quartiles come from the dataset given
    here, so run it on the full data before splitting. Standardization uses
    the sample standard deviation (divisor n-1) and records per-column
    statistics in the report for reuse on held-out data.
    """
    report = PreprocessReport(standardize=standardize, one_hot=one_hot, iqr_filter=iqr_filter)
    x, y, exposure = ds.x, ds.y, ds.exposure

    if iqr_filter:
        lo, hi = _iqr_bounds(y)
        keep = (y >= lo) & (y <= hi)
        report.removed_rows = int(np.sum(~keep))
        report.response_bounds = (lo, hi)
        x, y = x[keep], y[keep]
        if exposure is not None:
            exposure = exposure[keep]

    if standardize:
        for j, col in enumerate(ds.feature_columns):
            if col.kind != "continuous":
                continue
            mean = float(np.mean(x[:, j]))
            sd = float(np.std(x[:, j], ddof=1)) if x.shape[0] > 1 else 0.0
            if sd == 0.0:
                raise ConstantColumnError(col.name)
            report.column_stats[col.name] = (mean, sd)

    return _transform(ds.schema, x, y, exposure, report), report


def apply_preprocess(report: PreprocessReport, ds: Dataset) -> Dataset:
    """Apply stored training statistics to a validation or test dataset."""
    return _transform(ds.schema, ds.x, ds.y, ds.exposure, report)


def _transform(schema, x, y, exposure, report: PreprocessReport) -> Dataset:
    x = np.array(x, dtype=float)
    new_schema: list[ColumnSchema] = []
    new_cols: list[np.ndarray] = []
    feat_j = 0
    for col in schema:
        if col.role != "feature":
            new_schema.append(col)
            continue
        values = x[:, feat_j]
        feat_j += 1
        if col.kind == "categorical" and report.one_hot:
            onehot_cols = _one_hot_schema(col)
            codes = values.astype(int)
            block = np.zeros((x.shape[0], len(col.levels)))
            block[np.arange(x.shape[0]), codes] = 1.0
            new_schema.extend(onehot_cols)
            new_cols.extend(block.T)
        elif col.kind == "continuous" and col.name in report.column_stats:
            mean, sd = report.column_stats[col.name]
            new_schema.append(col)
            new_cols.append((values - mean) / sd)
        else:
            new_schema.append(col)
            new_cols.append(values)
    new_x = np.column_stack(new_cols) if new_cols else np.zeros((x.shape[0], 0))
    return Dataset(new_schema, new_x, y, exposure)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test proportions plus the shuffling seed."""

    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0.0 for f in fracs):
            raise ConfigError("split fractions must be positive")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)}")


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle rows with a seeded generator and partition them exactly.

    Validation and test sizes are floor(n * frac); the remainder goes to
    the training split. The same seed always yields the same partition.
    """
    if ds.n < 3:
        raise DataError("need at least 3 rows to split")
    n_val = int(np.floor(ds.n * spec.val_frac))
    n_test = int(np.floor(ds.n * spec.test_frac))
    n_train = ds.n - n_val - n_test
    perm = np.random.Generator(np.random.PCG64(spec.seed)).permutation(ds.n)
    train_idx = perm[:n_train]
    val_idx = perm[n_train : n_train + n_val]
    test_idx = perm[n_train + n_val :]
    return ds.take(train_idx), ds.take(val_idx), ds.take(test_idx)
