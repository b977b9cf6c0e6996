"""Case storage: feature attributes, validation, ingestion and snapshots.

Cases are stored verbatim in columnar form.  Mutating operations (train,
edit, remove) replace the affected columns wholesale under a lock, so any
previously taken snapshot remains a consistent read-only view of the store
at the version it was taken.
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np

FEATURE_KINDS = ("continuous", "nominal", "ordinal", "cyclic")

# Heuristics for deciding that a numeric column is really categorical.
_NOMINAL_DISTINCT_RATIO = 0.05
_NOMINAL_DISTINCT_CAP = 64


class SchemaError(ValueError):
    """Raised for invalid feature declarations or malformed input data."""


@dataclass
class FeatureAttribute:
    """Declared semantics of a single feature column."""

    name: str
    kind: str = "continuous"
    allows_null: bool = False
    bounds: tuple | None = None          # (low, high) for continuous/cyclic
    cycle_period: float | None = None    # required for cyclic
    ordinal_ranks: list | None = None    # ordered domain for ordinal
    domain: list | None = None           # closed value set for nominal
    is_time: bool = False
    dependent_on: list = field(default_factory=list)
    derived: bool = False                # produced by series derivation

    def validate(self):
        if not self.name:
            raise SchemaError("feature name must be non-empty")
        if self.kind not in FEATURE_KINDS:
            raise SchemaError(
                "feature %r has unknown kind %r; expected one of %s"
                % (self.name, self.kind, ", ".join(FEATURE_KINDS)))
        if self.kind == "cyclic":
            if not self.cycle_period or self.cycle_period <= 0:
                raise SchemaError(
                    "cyclic feature %r requires a positive cycle_period"
                    % self.name)
        if self.kind == "ordinal":
            if not self.ordinal_ranks:
                raise SchemaError(
                    "ordinal feature %r requires ordinal_ranks" % self.name)
            if len(set(self.ordinal_ranks)) != len(self.ordinal_ranks):
                raise SchemaError(
                    "ordinal feature %r has duplicate ranks" % self.name)
        if self.bounds is not None:
            lo, hi = self.bounds
            if lo is not None and hi is not None and lo > hi:
                raise SchemaError(
                    "feature %r has inverted bounds" % self.name)
        return self

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind,
             "allows_null": self.allows_null}
        if self.bounds is not None:
            d["bounds"] = list(self.bounds)
        if self.cycle_period is not None:
            d["cycle_period"] = self.cycle_period
        if self.ordinal_ranks is not None:
            d["ordinal_ranks"] = list(self.ordinal_ranks)
        if self.domain is not None:
            d["domain"] = list(self.domain)
        if self.is_time:
            d["is_time"] = True
        if self.dependent_on:
            d["dependent_on"] = list(self.dependent_on)
        if self.derived:
            d["derived"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        kw = dict(d)
        if "bounds" in kw:
            kw["bounds"] = tuple(kw["bounds"])
        return cls(**kw).validate()


def _is_null(v):
    if v is None:
        return True
    if isinstance(v, float) and math.isnan(v):
        return True
    if isinstance(v, str) and v.strip() == "":
        return True
    return False


def _try_float(v):
    try:
        x = float(v)
    except (TypeError, ValueError):
        return None
    if math.isnan(x) or math.isinf(x):
        return None
    return x


@dataclass
class EncodedColumn:
    """Numeric view of one column used by the compute paths.

    Continuous-like kinds are a float64 array with NaN for NULL.  Nominal
    values are int32 codes into ``table`` with -1 for NULL.  Ordinal values
    are their rank index as float64 (NaN for NULL) so rank distance works
    like continuous distance.
    """

    kind: str
    data: np.ndarray
    table: list | None = None
    cycle_period: float | None = None

    @property
    def null_mask(self):
        if self.kind == "nominal":
            return self.data < 0
        return np.isnan(self.data)


class StoreView:
    """Immutable snapshot of a :class:`CaseStore` at one version."""

    def __init__(self, features, cols, weights, provenance, version):
        self.features = features
        self.cols = cols
        self.weights = weights
        self.provenance = provenance
        self.version = version
        self.n = len(weights)
        self.feature_map = {f.name: f for f in features}

    @property
    def feature_names(self):
        return [f.name for f in self.features]

    def encode_value(self, name, value):
        """Encode one raw value into the numeric space of its column."""
        col = self.cols[name]
        if _is_null(value):
            return -1 if col.kind == "nominal" else np.nan
        if col.kind == "nominal":
            try:
                return col.table.index(value)
            except ValueError:
                return -2  # out-of-table value: matches nothing
        if col.kind == "ordinal":
            att = self.feature_map[name]
            try:
                return float(att.ordinal_ranks.index(value))
            except ValueError:
                x = _try_float(value)
                if x is not None:
                    return x
                raise SchemaError(
                    "value %r is not a rank of ordinal feature %r"
                    % (value, name))
        return float(value)

    def decode_value(self, name, encoded):
        col = self.cols[name]
        if col.kind == "nominal":
            return None if encoded < 0 else col.table[int(encoded)]
        if isinstance(encoded, float) and math.isnan(encoded):
            return None
        if col.kind == "ordinal":
            att = self.feature_map[name]
            idx = int(round(encoded))
            idx = min(max(idx, 0), len(att.ordinal_ranks) - 1)
            return att.ordinal_ranks[idx]
        return float(encoded)


class CaseStore:
    """Columnar store of training cases with snapshot isolation.

    Readers call :meth:`snapshot` and work against the frozen view; writers
    serialize through an internal lock and bump ``version``.
    """

    def __init__(self, features):
        self.features = [f.validate() for f in features]
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names: %r" % (names,))
        for f in self.features:
            for dep in f.dependent_on:
                if dep not in names:
                    raise SchemaError(
                        "feature %r depends on unknown feature %r"
                        % (f.name, dep))
        self._values = {n: [] for n in names}
        self._weights = []
        self._provenance = []
        self.version = 0
        self.series_config = None
        self._lock = threading.RLock()
        self._snapshot_cache = None

    def __len__(self):
        return len(self._weights)

    @property
    def feature_names(self):
        return [f.name for f in self.features]

    @property
    def feature_map(self):
        return {f.name: f for f in self.features}

    # ------------------------------------------------------------------
    # Validation and mutation

    def _validate_case(self, case):
        """Return (values_in_order, reason). reason is None when valid."""
        fmap = self.feature_map
        unknown = set(case) - set(fmap)
        if unknown:
            return None, "unknown features: %s" % ", ".join(sorted(unknown))
        out = []
        for f in self.features:
            v = case.get(f.name)
            if _is_null(v):
                if not f.allows_null:
                    return None, "feature %r does not allow NULL" % f.name
                out.append(None)
                continue
            if f.kind == "nominal":
                if f.domain is not None and v not in f.domain:
                    return None, (
                        "value %r outside the domain of nominal feature %r"
                        % (v, f.name))
                out.append(v)
            elif f.kind == "ordinal":
                if v not in f.ordinal_ranks:
                    return None, (
                        "value %r is not a rank of ordinal feature %r"
                        % (v, f.name))
                out.append(v)
            else:
                x = _try_float(v)
                if x is None:
                    return None, (
                        "value %r is not numeric for feature %r"
                        % (v, f.name))
                if f.bounds is not None:
                    lo, hi = f.bounds
                    if (lo is not None and x < lo) or \
                       (hi is not None and x > hi):
                        return None, (
                            "value %r outside bounds %r of feature %r"
                            % (v, f.bounds, f.name))
                out.append(x)
        return out, None

    def train(self, cases, weights=None, session="default"):
        """Append cases.  Returns (accepted_count, rejections).

        ``rejections`` is a list of (case_index, reason) for cases that
        failed validation; valid cases are still stored.
        """
        rejections = []
        accepted = []
        accepted_weights = []
        for i, case in enumerate(cases):
            vals, reason = self._validate_case(case)
            if reason is not None:
                rejections.append((i, reason))
                continue
            accepted.append(vals)
            w = 1.0 if weights is None else float(weights[i])
            if not (w > 0) or math.isinf(w):
                rejections.append((i, "weight must be positive and finite"))
                accepted.pop()
                continue
            accepted_weights.append(w)
        with self._lock:
            base = len(self._weights)
            for j, vals in enumerate(accepted):
                for f, v in zip(self.features, vals):
                    self._values[f.name].append(v)
                self._weights.append(accepted_weights[j])
                self._provenance.append((session, base + j))
            self._bump()
        self._rederive_series()
        return len(accepted), rejections

    def edit(self, index, changes):
        with self._lock:
            case = self.get_case(index)
            case.update(changes)
            vals, reason = self._validate_case(case)
            if reason is not None:
                raise SchemaError("edit rejected: %s" % reason)
            for f, v in zip(self.features, vals):
                self._values[f.name][index] = v
            self._bump()
        self._rederive_series()

    def remove(self, indices):
        keep = sorted(set(range(len(self))) - set(indices))
        with self._lock:
            for name in self._values:
                col = self._values[name]
                self._values[name] = [col[i] for i in keep]
            self._weights = [self._weights[i] for i in keep]
            self._provenance = [self._provenance[i] for i in keep]
            self._bump()
        self._rederive_series()

    def set_weights(self, weights):
        if len(weights) != len(self):
            raise SchemaError("weight vector length mismatch")
        with self._lock:
            self._weights = [float(w) for w in weights]
            self._bump()

    def add_feature(self, att, values):
        att.validate()
        if att.name in self._values:
            raise SchemaError("feature %r already exists" % att.name)
        if len(values) != len(self):
            raise SchemaError("column length mismatch for %r" % att.name)
        with self._lock:
            self.features.append(att)
            self._values[att.name] = list(values)
            self._bump()

    def drop_features(self, names):
        with self._lock:
            self.features = [f for f in self.features if f.name not in names]
            for n in names:
                self._values.pop(n, None)
            self._bump()

    def _bump(self):
        self.version += 1
        self._snapshot_cache = None

    def _rederive_series(self):
        if self.series_config is not None:
            from . import series
            series.rederive(self)

    # ------------------------------------------------------------------
    # Access

    def get_case(self, index):
        return {f.name: self._values[f.name][index] for f in self.features}

    def iter_cases(self):
        for i in range(len(self)):
            yield self.get_case(i)

    @property
    def weights(self):
        return list(self._weights)

    def snapshot(self):
        with self._lock:
            if self._snapshot_cache is not None:
                return self._snapshot_cache
            cols = {}
            for f in self.features:
                raw = self._values[f.name]
                if f.kind == "nominal":
                    table = sorted(
                        {v for v in raw if v is not None},
                        key=lambda v: (str(type(v)), str(v)))
                    if f.domain is not None:
                        for v in f.domain:
                            if v not in table:
                                table.append(v)
                    index = {v: i for i, v in enumerate(table)}
                    data = np.array(
                        [index[v] if v is not None else -1 for v in raw],
                        dtype=np.int32)
                    cols[f.name] = EncodedColumn("nominal", data, table)
                elif f.kind == "ordinal":
                    rank = {v: float(i)
                            for i, v in enumerate(f.ordinal_ranks)}
                    data = np.array(
                        [rank[v] if v is not None else np.nan for v in raw],
                        dtype=np.float64)
                    cols[f.name] = EncodedColumn("ordinal", data)
                else:
                    data = np.array(
                        [v if v is not None else np.nan for v in raw],
                        dtype=np.float64)
                    cols[f.name] = EncodedColumn(
                        f.kind, data, cycle_period=f.cycle_period)
            view = StoreView(list(self.features), cols,
                             np.asarray(self._weights, dtype=np.float64),
                             list(self._provenance), self.version)
            self._snapshot_cache = view
            return view

    # ------------------------------------------------------------------
    # Serialization

    def to_json(self):
        return json.dumps({
            "format": "surprisal-engine-store",
            "version": 1,
            "features": [f.to_dict() for f in self.features],
            "cases": [self.get_case(i) for i in range(len(self))],
            "weights": self.weights,
            "provenance": [list(p) for p in self._provenance],
            "series_config": (self.series_config.to_dict()
                              if self.series_config else None),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != "surprisal-engine-store":
            raise SchemaError("not a case store document")
        store = cls([FeatureAttribute.from_dict(d) for d in doc["features"]])
        store.train(doc["cases"], weights=doc["weights"])
        store._provenance = [tuple(p) for p in doc["provenance"]]
        if doc.get("series_config"):
            from .series import SeriesConfig
            store.series_config = SeriesConfig.from_dict(doc["series_config"])
        return store


# ----------------------------------------------------------------------
# Attribute inference

def _looks_like_date(values):
    import datetime
    parsed = []
    for v in values:
        if not isinstance(v, str):
            return None
        try:
            parsed.append(datetime.datetime.fromisoformat(v).timestamp())
        except ValueError:
            return None
    return parsed


def infer_feature_attributes(rows, header):
    """Infer feature attributes from raw tabular data.

    ``rows`` is a list of records (lists aligned with ``header``).  Numeric
    columns with few distinct values are treated as nominal, ISO-date
    columns as time, everything else numeric as continuous and everything
    else as nominal.
    """
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(
                "row %d has %d fields, expected %d"
                % (i, len(row), len(header)))
    atts = []
    n = len(rows)
    for j, name in enumerate(header):
        col = [row[j] for row in rows]
        nonnull = [v for v in col if not _is_null(v)]
        allows_null = len(nonnull) < n
        if not nonnull:
            atts.append(FeatureAttribute(name, "nominal", allows_null=True))
            continue
        floats = [_try_float(v) for v in nonnull]
        if all(x is not None for x in floats):
            distinct = len(set(floats))
            if (distinct / len(floats) <= _NOMINAL_DISTINCT_RATIO
                    and distinct <= _NOMINAL_DISTINCT_CAP):
                atts.append(FeatureAttribute(
                    name, "nominal", allows_null=allows_null))
            else:
                atts.append(FeatureAttribute(
                    name, "continuous", allows_null=allows_null))
            continue
        stamps = _looks_like_date(nonnull)
        if stamps is not None:
            atts.append(FeatureAttribute(
                name, "continuous", allows_null=allows_null, is_time=True))
            continue
        atts.append(FeatureAttribute(name, "nominal", allows_null=allows_null))
    return [a.validate() for a in atts]


def read_csv(text_or_path):
    """Read CSV content (a path or raw text) into (header, rows)."""
    if isinstance(text_or_path, str) and "\n" not in text_or_path \
            and "," not in text_or_path:
        with open(text_or_path, "r", newline="") as fh:
            content = fh.read()
    else:
        content = text_or_path
    reader = csv.reader(io.StringIO(content))
    table = [row for row in reader if row]
    if not table:
        raise SchemaError("empty CSV input")
    return table[0], table[1:]


def store_from_csv(text_or_path, features=None):
    header, rows = read_csv(text_or_path)
    if features is None:
        features = infer_feature_attributes(rows, header)
    store = CaseStore(features)
    cases = [dict(zip(header, row)) for row in rows]
    count, rejections = store.train(cases)
    return store, rejections
