"""B-test and W-test anomaly features and feature selection.

A B-test bins a feature on population quantiles and measures how far an
entity's binned frequencies sit from the population's (half the L1
distance). A W-test is the first Wasserstein distance between the entity's
raw values and the population sample.
"""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spidernet.data import Dataset

MIN_RECORDS = 30


@dataclass(frozen=True)
class BWTestConfig:
    """One generated column.

    ``kind`` is ``"b"`` or ``"w"``. ``segment`` names a feature whose values
    partition the population (e.g. business sphere); each entity is then
    compared against the records sharing its most frequent segment value.
    ``threshold`` binarizes a B-test score as ``S > threshold``.
    """

    kind: str
    feature: str
    n_quantiles: int = 10
    segment: str | None = None
    threshold: float | None = None
    min_records: int = MIN_RECORDS

    def __post_init__(self):
        if self.kind not in ("b", "w"):
            raise ValueError(f"kind must be 'b' or 'w', got {self.kind!r}")
        if self.n_quantiles < 2:
            raise ValueError("n_quantiles must be >= 2")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.min_records < 1:
            raise ValueError("min_records must be >= 1")

    @property
    def column(self):
        if self.kind == "w":
            name = f"wtest_{self.feature}"
        else:
            name = f"btest_{self.feature}_q{self.n_quantiles}"
        if self.segment:
            name += f"_by_{self.segment}"
        if self.threshold is not None:
            name += f"_gt{self.threshold:g}"
        return name


def load_bw_config(path):
    """Read a JSON list (or ``{"tests": [...]}``) of test definitions."""
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = raw.get("tests", [])
    return [BWTestConfig(**item) for item in raw]


def quantile_bins(population, n):
    """Interior bin edges at the empirical quantiles i/n, i = 1..n-1 (linear interpolation)."""
    values = np.asarray(population, dtype=np.float64).ravel()
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise ValueError("population is empty")
    if n < 2:
        raise ValueError("n must be >= 2")
    return np.quantile(values, np.arange(1, n) / n)


def bin_index(values, edges):
    """Right-closed binning: value v goes to the first bin whose upper edge is >= v."""
    return np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="left")


def bin_frequencies(values, edges):
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    counts = np.bincount(bin_index(values, edges), minlength=len(edges) + 1)
    return counts / counts.sum()


def category_frequencies(values, categories):
    values = np.asarray(values)
    values = values[~np.isnan(values)]
    counts = np.array([(values == c).sum() for c in categories], dtype=np.float64)
    return counts / counts.sum()


def btest(a, b):
    """Half the L1 distance between two probability vectors, in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"distributions must be equal-length vectors, got {a.shape} and {b.shape}")
    for name, v in (("a", a), ("b", b)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a probability vector")
    # exact on the printed decimals, rounded once: [0.7, 0.3] vs [0.4, 0.6] gives 0.3, not 0.29999999999999993
    total = sum((abs(Fraction(str(x)) - Fraction(str(y))) for x, y in zip(a.tolist(), b.tolist())), Fraction(0))
    return float(total / 2)


def _numeric_sample(x, name):
    x = np.asarray(x)
    if x.dtype.kind not in "biuf":
        raise TypeError(f"{name} must be numeric, got dtype {x.dtype}")
    x = x.astype(np.float64).ravel()
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    return x


def wtest(sample, population):
    """First Wasserstein distance between two empirical distributions.

    Computed as the area between the two empirical CDFs.
    """
    u = np.sort(_numeric_sample(sample, "sample"))
    v = np.sort(_numeric_sample(population, "population"))
    grid = np.concatenate([u, v])
    grid.sort(kind="mergesort")
    gaps = np.diff(grid)
    cdf_u = np.searchsorted(u, grid[:-1], side="right") / u.size
    cdf_v = np.searchsorted(v, grid[:-1], side="right") / v.size
    return float(np.sum(np.abs(cdf_u - cdf_v) * gaps))


# ---------------------------------------------------------------------------
# feature generation


def _segment_masks(dataset: Dataset, cfg: BWTestConfig):
    """Map each entity to the boolean row mask of its reference population."""
    everyone = np.ones(dataset.n_rows, dtype=bool)
    if not cfg.segment:
        return lambda rows: everyone
    seg = dataset.column(cfg.segment)

    def mask(rows):
        vals = seg[rows]
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            return everyone
        uniq, counts = np.unique(vals, return_counts=True)
        return seg == uniq[np.argmax(counts)]

    return mask


def entity_scores(dataset: Dataset, cfg: BWTestConfig):
    """Per-entity B/W score (NaN when an entity has fewer than ``min_records`` values)."""
    if cfg.feature not in dataset.feature_names:
        raise KeyError(f"unknown feature {cfg.feature!r}")
    if cfg.segment and cfg.segment not in dataset.feature_names:
        raise KeyError(f"unknown segment feature {cfg.segment!r}")
    values = dataset.column(cfg.feature)
    categorical = dataset.is_categorical(cfg.feature)
    if cfg.kind == "w" and categorical:
        raise TypeError(f"W-tests need a numeric feature; {cfg.feature!r} is categorical")
    population_mask = _segment_masks(dataset, cfg)
    ref_cache = {}
    scores = {}
    for entity, rows in dataset.entity_rows().items():
        own = values[rows]
        own = own[~np.isnan(own)]
        if own.size < cfg.min_records:
            scores[entity] = np.nan
            continue
        pmask = population_mask(rows)
        key = pmask.tobytes() if cfg.segment else None
        if key not in ref_cache:
            pop = values[pmask]
            pop = pop[~np.isnan(pop)]
            if cfg.kind == "w":
                ref_cache[key] = pop
            elif categorical:
                cats = np.unique(pop)
                ref_cache[key] = (cats, category_frequencies(pop, cats))
            else:
                edges = quantile_bins(pop, cfg.n_quantiles)
                ref_cache[key] = (edges, bin_frequencies(pop, edges))
        ref = ref_cache[key]
        if cfg.kind == "w":
            s = wtest(own, ref)
        elif categorical:
            cats, pfreq = ref
            own_cats = np.unique(own)
            extra = np.setdiff1d(own_cats, cats)
            allcats = np.concatenate([cats, extra])
            s = btest(category_frequencies(own, allcats), np.concatenate([pfreq, np.zeros(extra.size)]))
        else:
            edges, pfreq = ref
            s = btest(bin_frequencies(own, edges), pfreq)
        if cfg.threshold is not None:
            s = float(s > cfg.threshold)
        scores[entity] = s
    return scores


def generate_bw_features(dataset: Dataset, configs):
    """Return a new dataset with one appended column per B/W test config."""
    rows_of = dataset.entity_rows()
    new_cols = {}
    for cfg in configs:
        col = np.full(dataset.n_rows, np.nan)
        for entity, s in entity_scores(dataset, cfg).items():
            col[rows_of[entity]] = s
        new_cols[cfg.column] = col
    return dataset.with_columns(new_cols)


# ---------------------------------------------------------------------------
# feature selection


def fill_rate_filter(dataset: Dataset, min_rate):
    """Names of features whose non-missing fraction is at least ``min_rate``."""
    if not 0.0 <= min_rate <= 1.0:
        raise ValueError("min_rate must be in [0, 1]")
    rates = dataset.fill_rates()
    return [n for n in dataset.feature_names if rates[n] >= min_rate]


def _standardized_columns(X):
    """Unit-norm centered columns; missing values are mean-filled, constant columns become 0."""
    X = np.array(X, dtype=np.float64)
    out = np.zeros_like(X)
    for j in range(X.shape[1]):
        col = X[:, j]
        present = ~np.isnan(col)
        if not present.any():
            continue
        col = np.where(present, col, col[present].mean())
        col = col - col.mean()
        norm = np.sqrt(col @ col)
        if norm > 0:
            out[:, j] = col / norm
    return out


def correlation_prune(dataset: Dataset, labels=None, threshold=0.9, features=None):
    """Drop the less label-correlated member of every pair with |rho| > threshold.

    Pairs are visited in descending |rho|; ties are visited in name order and
    a tie in label correlation drops the lexicographically larger name, so the
    result does not depend on column order.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    names = list(features if features is not None else dataset.feature_names)
    labels = dataset.y if labels is None else np.asarray(labels)
    ordered = sorted(names)
    X = np.column_stack([dataset.column(n) for n in ordered] + [labels.astype(np.float64)])
    Z = _standardized_columns(X)
    target = {n: abs(float(Z[:, i] @ Z[:, -1])) for i, n in enumerate(ordered)}
    pairs = []
    for i, a in enumerate(ordered):
        for j in range(i + 1, len(ordered)):
            rho = abs(float(Z[:, i] @ Z[:, j]))
            if rho > threshold:
                pairs.append((-rho, a, ordered[j]))
    pairs.sort()
    dropped = set()
    for _, a, b in pairs:
        if a in dropped or b in dropped:
            continue
        dropped.add(b if target[a] >= target[b] else a)
    return [n for n in names if n not in dropped]
