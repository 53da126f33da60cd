"""Dataset model, CSV + schema I/O, stratified splitting and synthetic data."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ROLES = ("feature", "label", "entity_id", "P", "DR", "DR0")
FINANCE_ROLES = ("P", "DR", "DR0")


class DataError(ValueError):
    """Malformed input data or schema."""


@dataclass
class Dataset:
    """Records of features with binary labels and entity ids.

    ``X`` holds float64 features with NaN as the missing marker; categorical
    features are stored as numeric category codes. ``finance`` is an optional
    (n, 3) array of portfolio, default rate and zero-target default rate.
    """

    feature_names: list
    X: np.ndarray
    y: np.ndarray
    entity: np.ndarray
    feature_types: dict = field(default_factory=dict)
    finance: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.y), len(self.feature_names))
        self.y = np.asarray(self.y).astype(np.int64)
        self.entity = np.asarray(self.entity).astype(str)
        if self.entity.shape != self.y.shape:
            raise DataError("entity ids and labels differ in length")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise DataError("labels must be 0 or 1")
        if self.finance is not None:
            self.finance = np.asarray(self.finance, dtype=np.float64).reshape(len(self.y), 3)
        for name in self.feature_names:
            self.feature_types.setdefault(name, "numeric")

    @property
    def n_rows(self):
        return len(self.y)

    @property
    def fraud_rate(self):
        return float(self.y.mean()) if self.n_rows else 0.0

    def column(self, name):
        return self.X[:, self.feature_names.index(name)]

    def is_categorical(self, name):
        return self.feature_types.get(name) == "categorical"

    def entity_rows(self):
        """Entity id -> row indices, in order of first appearance."""
        order, inverse = np.unique(self.entity, return_inverse=True)
        first = np.full(len(order), self.n_rows)
        np.minimum.at(first, inverse, np.arange(self.n_rows))
        groups = {}
        for code in np.argsort(first, kind="stable"):
            groups[order[code]] = np.nonzero(inverse == code)[0]
        return groups

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            list(self.feature_names),
            self.X[rows],
            self.y[rows],
            self.entity[rows],
            dict(self.feature_types),
            None if self.finance is None else self.finance[rows],
        )

    def select(self, names):
        idx = [self.feature_names.index(n) for n in names]
        types = {n: self.feature_types[n] for n in names}
        return Dataset(list(names), self.X[:, idx], self.y, self.entity, types, self.finance)

    def with_columns(self, columns: dict, kind="numeric"):
        names = list(self.feature_names)
        X = self.X
        types = dict(self.feature_types)
        for name, col in columns.items():
            if name in names:
                raise DataError(f"column {name!r} already exists")
            names.append(name)
            types[name] = kind
            X = np.column_stack([X, np.asarray(col, dtype=np.float64)])
        return Dataset(names, X, self.y, self.entity, types, self.finance)

    def fill_rates(self):
        present = (~np.isnan(self.X)).sum(axis=0)
        n = max(self.n_rows, 1)
        return {name: float(present[i] / n) for i, name in enumerate(self.feature_names)}

    def fill_report(self):
        """Per-feature counts of present and missing values."""
        missing = np.isnan(self.X).sum(axis=0)
        return {
            name: {"present": int(self.n_rows - missing[i]), "missing": int(missing[i]), "total": self.n_rows}
            for i, name in enumerate(self.feature_names)
        }

    # -- schema ----------------------------------------------------------------

    def schema(self):
        cols = [{"name": "entity_id", "type": "categorical", "role": "entity_id"}]
        cols += [{"name": n, "type": self.feature_types[n], "role": "feature"} for n in self.feature_names]
        cols.append({"name": "label", "type": "numeric", "role": "label"})
        if self.finance is not None:
            cols += [{"name": r, "type": "numeric", "role": r} for r in FINANCE_ROLES]
        return {"columns": cols}


def _fmt(v):
    return "" if np.isnan(v) else repr(float(v))


def save_csv(dataset: Dataset, path, schema_path=None):
    """Write the dataset as CSV plus a JSON schema sidecar (``<path>.schema.json`` by default)."""
    path = Path(path)
    schema_path = Path(schema_path) if schema_path else path.with_suffix(".schema.json")
    schema = dataset.schema()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c["name"] for c in schema["columns"]])
        for i in range(dataset.n_rows):
            row = [dataset.entity[i]] + [_fmt(v) for v in dataset.X[i]] + [str(int(dataset.y[i]))]
            if dataset.finance is not None:
                row += [_fmt(v) for v in dataset.finance[i]]
            w.writerow(row)
    schema_path.write_text(json.dumps(schema, indent=2) + "\n")
    return path, schema_path


def load_schema(path):
    schema = json.loads(Path(path).read_text())
    cols = schema.get("columns")
    if not isinstance(cols, list) or not cols:
        raise DataError(f"{path}: schema needs a non-empty 'columns' list")
    for c in cols:
        if c.get("role") not in ROLES:
            raise DataError(f"{path}: column {c.get('name')!r} has unknown role {c.get('role')!r}")
        if c.get("type", "numeric") not in ("numeric", "categorical"):
            raise DataError(f"{path}: column {c.get('name')!r} has unknown type {c.get('type')!r}")
    roles = [c["role"] for c in cols]
    for needed in ("label", "entity_id"):
        if roles.count(needed) != 1:
            raise DataError(f"{path}: schema needs exactly one {needed!r} column")
    fin = [r for r in roles if r in FINANCE_ROLES]
    if fin and sorted(fin) != sorted(FINANCE_ROLES):
        raise DataError(f"{path}: financial columns must include all of P, DR, DR0")
    return schema


def load_csv(path, schema=None):
    """Parse a CSV file against its schema; errors name the line and column."""
    path = Path(path)
    if schema is None:
        schema = path.with_suffix(".schema.json")
    if not isinstance(schema, dict):
        schema = load_schema(schema)
    cols = schema["columns"]
    names = [c["name"] for c in cols]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != names:
            raise DataError(f"{path}: header {header} does not match schema {names}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise DataError(f"{path}:{line_no}: expected {len(names)} fields, got {len(row)}")
            rows.append((line_no, row))
    feat_idx = [i for i, c in enumerate(cols) if c["role"] == "feature"]
    label_i = next(i for i, c in enumerate(cols) if c["role"] == "label")
    ent_i = next(i for i, c in enumerate(cols) if c["role"] == "entity_id")
    fin_idx = [next(i for i, c in enumerate(cols) if c["role"] == r) for r in FINANCE_ROLES
               if any(c["role"] == r for c in cols)]
    n = len(rows)
    X = np.full((n, len(feat_idx)), np.nan)
    y = np.zeros(n, dtype=np.int64)
    ent = []
    fin = np.full((n, 3), np.nan) if fin_idx else None

    def num(line_no, j, text):
        try:
            return float(text)
        except ValueError:
            raise DataError(f"{path}:{line_no}: column {names[j]!r}: cannot parse {text!r} as a number") from None

    for r, (line_no, row) in enumerate(rows):
        for k, j in enumerate(feat_idx):
            if row[j] != "":
                X[r, k] = num(line_no, j, row[j])
        if row[label_i] not in ("0", "1", "0.0", "1.0"):
            raise DataError(f"{path}:{line_no}: column {names[label_i]!r}: label must be 0 or 1, got {row[label_i]!r}")
        y[r] = int(float(row[label_i]))
        ent.append(row[ent_i])
        for k, j in enumerate(fin_idx):
            fin[r, k] = num(line_no, j, row[j]) if row[j] != "" else np.nan
    feature_names = [names[j] for j in feat_idx]
    types = {names[j]: cols[j].get("type", "numeric") for j in feat_idx}
    ds = Dataset(feature_names, X, y, np.array(ent, dtype=str), types, fin)
    rates = ds.fill_rates()
    low = {k: v for k, v in rates.items() if v < 1.0}
    log.info("loaded %d rows x %d features from %s; %d features with missing values", n, len(feature_names), path, len(low))
    return ds


# ---------------------------------------------------------------------------
# splitting


def _largest_remainder(total, fractions):
    raw = np.asarray(fractions) * total
    base = np.floor(raw).astype(int)
    rest = total - base.sum()
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def stratified_split_indices(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0, by_entity=True):
    """Row indices of each split, stratified by label.

    With ``by_entity`` all rows of an entity land in the same split and the
    entity's class is the max of its row labels; otherwise every row is its
    own group. Groups of each class are shuffled and handed, one at a time,
    to the split that is furthest below its record target.
    """
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    if dataset.y.sum() < 10:
        warnings.warn(f"only {int(dataset.y.sum())} positive records; splits will be thin", stacklevel=2)
    rng = np.random.default_rng(seed)
    if by_entity:
        groups = list(dataset.entity_rows().values())
    else:
        groups = [np.array([i]) for i in range(dataset.n_rows)]
    labels = np.array([dataset.y[g].max() for g in groups])
    assigned = [[] for _ in fractions]
    for cls in (0, 1):
        members = [groups[i] for i in np.nonzero(labels == cls)[0]]
        if not members:
            continue
        members = [members[i] for i in rng.permutation(len(members))]
        target = _largest_remainder(sum(len(g) for g in members), fractions)
        got = np.zeros(len(fractions), dtype=int)
        for g in members:
            s = int(np.argmax(target - got))
            got[s] += len(g)
            assigned[s].append(g)
    return tuple(np.sort(np.concatenate(a)) if a else np.zeros(0, dtype=np.int64) for a in assigned)


def stratified_split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0, by_entity=True):
    return tuple(dataset.subset(idx) for idx in stratified_split_indices(dataset, fractions, seed, by_entity))


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class Standardizer:
    """Z-scoring fitted on training rows; missing values become 0 after scaling.

    ``pad`` appends that many all-zero columns (the training mean) so the
    vector fits a network's pooling grid.
    """

    mean: list
    std: list
    indicators: bool = False
    pad: int = 0

    @classmethod
    def fit(cls, X, indicators=False, pad=0):
        X = np.asarray(X, dtype=np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(X, axis=0)
            std = np.nanstd(X, axis=0)
        mean = np.where(np.isnan(mean), 0.0, mean)
        std = np.where(~np.isfinite(std) | (std == 0), 1.0, std)
        return cls(mean.tolist(), std.tolist(), indicators, int(pad))

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        missing = np.isnan(X)
        Z = (X - np.asarray(self.mean)) / np.asarray(self.std)
        Z[missing] = 0.0
        if self.indicators:
            Z = np.column_stack([Z, (~missing).astype(np.float64)])
        if self.pad:
            Z = np.column_stack([Z, np.zeros((len(Z), self.pad))])
        return Z

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Knobs of the synthetic fraud generator.

    Fraud entities draw ``n_shifted`` numeric features from a latent normal
    that is moved by ``shift`` standard deviations and widened by a factor
    ``1 + scale_shift``; the other features and all non-fraud entities share
    the population distribution.
    """

    n_entities: int = 2500
    records_per_entity: tuple = (2, 2)
    fraud_fraction: float = 0.02
    n_features: int = 32
    n_shifted: int = 6
    shift: float = 2.0
    scale_shift: float = 0.0
    n_categorical: int = 1
    n_categories: int = 5
    n_segments: int = 3
    n_sparse: int = 2
    sparse_missing_rate: float = 0.6
    missing_rate: float = 0.01
    portfolio_range: tuple = (10_000.0, 200_000.0)
    zero_target_rate: float = 0.1
    fraud_dr_range: tuple = (0.2, 0.8)
    seed: int = 0

    def __post_init__(self):
        self.records_per_entity = tuple(int(v) for v in self.records_per_entity)
        self.portfolio_range = tuple(float(v) for v in self.portfolio_range)
        self.fraud_dr_range = tuple(float(v) for v in self.fraud_dr_range)
        lo, hi = self.records_per_entity
        if self.n_entities < 1:
            raise ValueError("n_entities must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError("records_per_entity must be (min, max) with 1 <= min <= max")
        if not 0.0 < self.fraud_fraction < 1.0:
            raise ValueError("fraud_fraction must be in (0, 1)")
        if self.shift < 0 or self.scale_shift < 0:
            raise ValueError("shift magnitudes must be >= 0")
        if not 0 <= self.n_shifted <= self.n_features:
            raise ValueError("n_shifted must be between 0 and n_features")
        if self.n_sparse > self.n_features - self.n_shifted:
            raise ValueError("sparse features must come from the unshifted ones")
        if not 0.0 <= self.zero_target_rate < 1.0:
            raise ValueError("zero_target_rate must be in [0, 1)")
        if not self.zero_target_rate < self.fraud_dr_range[0] <= self.fraud_dr_range[1] <= 1.0:
            raise ValueError("fraud default rates must exceed the zero-target rate")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _population_transform(j, z, component):
    """Monotone-in-z map from the latent normal to feature j's marginal."""
    kind = j % 3
    if kind == 0:
        return z + 3.0 * component  # two-component Gaussian mixture
    if kind == 1:
        return np.exp(0.5 * z + 1.0)  # lognormal
    return 10.0 + 2.0 * z


def synth_generate(config: SynthConfig):
    """Generate a labelled, entity-structured dataset with financial columns."""
    c = config
    rng = np.random.default_rng(c.seed)
    n_fraud = int(round(c.fraud_fraction * c.n_entities))
    fraud = np.zeros(c.n_entities, dtype=bool)
    fraud[rng.choice(c.n_entities, size=n_fraud, replace=False)] = True
    sizes = rng.integers(c.records_per_entity[0], c.records_per_entity[1] + 1, size=c.n_entities)
    ent_of_row = np.repeat(np.arange(c.n_entities), sizes)
    n = int(sizes.sum())
    row_fraud = fraud[ent_of_row]

    shifted = np.arange(c.n_shifted)
    X = np.empty((n, c.n_features))
    for j in range(c.n_features):
        z = rng.standard_normal(n)
        comp = (rng.random(n) < 0.3).astype(np.float64)
        if j in shifted:
            z = np.where(row_fraud, c.shift + (1.0 + c.scale_shift) * z, z)
        X[:, j] = _population_transform(j, z, comp)
        rate = c.sparse_missing_rate if c.n_features - c.n_sparse <= j else c.missing_rate
        X[rng.random(n) < rate, j] = np.nan
    names = [f"f{j:03d}" for j in range(c.n_features)]
    types = {nm: "numeric" for nm in names}

    extra = []
    base = np.linspace(2.0, 1.0, c.n_categories)
    base /= base.sum()
    alpha = min(1.0, (c.shift + c.scale_shift) / 2.0)
    for k in range(c.n_categorical):
        probs_fraud = (1 - alpha) * base + alpha * base[::-1]
        draw_pop = rng.choice(c.n_categories, size=n, p=base)
        draw_fraud = rng.choice(c.n_categories, size=n, p=probs_fraud)
        extra.append((f"cat{k}", np.where(row_fraud, draw_fraud, draw_pop).astype(np.float64)))
    if c.n_segments > 1:
        seg = rng.integers(0, c.n_segments, size=c.n_entities)
        extra.append(("segment", seg[ent_of_row].astype(np.float64)))
    for name, col in extra:
        names.append(name)
        types[name] = "categorical"
        X = np.column_stack([X, col])

    portfolio = rng.uniform(*c.portfolio_range, size=c.n_entities)
    dr = np.where(
        fraud,
        rng.uniform(*c.fraud_dr_range, size=c.n_entities),
        rng.uniform(0.0, c.zero_target_rate, size=c.n_entities),
    )
    finance = np.column_stack([portfolio, dr, np.full(c.n_entities, c.zero_target_rate)])[ent_of_row]
    entity = np.array([f"E{e:06d}" for e in ent_of_row])
    return Dataset(names, X, row_fraud.astype(np.int64), entity, types, finance)
