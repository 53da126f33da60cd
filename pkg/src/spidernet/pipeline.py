"""End-to-end helpers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from spidernet import architectures, metrics
from spidernet.architectures import Network
from spidernet.data import Dataset, Standardizer, stratified_split_indices
from spidernet.training import NumericalError, TrainConfig, TrainHistory, train

DESK_SPIDERNET = dict(n_blocks=6, filters=10, kernel=3, hidden=100, dropout=0.25)


@dataclass
class FitResult:
    net: Network
    history: TrainHistory
    standardizer: Standardizer
    split_indices: tuple


def input_pad(arch, n_columns, arch_kwargs=None):
    """Zero columns to append so that block 1 of ``arch`` reads every real column."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = architectures.build(arch, input_length=n_columns, **(arch_kwargs or {}))
    return architectures.input_padding(spec)


def prepare(dataset: Dataset, split_seed=0, by_entity=True, fractions=(0.8, 0.1, 0.1), pad=0):
    """Split indices, a standardizer fitted on the train rows and the scaled matrix."""
    idx = stratified_split_indices(dataset, fractions, split_seed, by_entity)
    scaler = Standardizer.fit(dataset.X[idx[0]], pad=pad)
    return idx, scaler, scaler.transform(dataset.X)


def fit(dataset: Dataset, arch="spidernet", arch_kwargs=None, config=None, split_seed=0, by_entity=True):
    """Split 80/10/10, standardize on train, build ``arch`` and train it."""
    config = config or TrainConfig()
    pad = input_pad(arch, dataset.X.shape[1], arch_kwargs)
    idx, scaler, Z = prepare(dataset, split_seed, by_entity, pad=pad)
    tr, va, _ = idx
    spec = architectures.build(arch, input_length=Z.shape[1], **(arch_kwargs or {}))
    net = Network(spec, seed=config.seed)
    _, history = train(net, ((Z[tr], dataset.y[tr]), (Z[va], dataset.y[va])), config)
    return FitResult(net, history, scaler, idx)


def entity_table(dataset: Dataset, scores):
    """One :class:`ScoredEntity` per entity; the entity score is its highest record score."""
    if dataset.finance is None:
        raise ValueError("dataset has no financial columns (P, DR, DR0)")
    out = []
    for ent, rows in dataset.entity_rows().items():
        p, dr, dr0 = dataset.finance[rows[0]]
        out.append(metrics.ScoredEntity(str(ent), float(np.max(scores[rows])), int(dataset.y[rows].max()), p, dr, dr0))
    return out


def score(net: Network, scaler: Standardizer, dataset: Dataset):
    s = net.predict_proba(scaler.transform(dataset.X))[:, 1]
    if not np.all(np.isfinite(s)):
        raise NumericalError(f"{int(np.sum(~np.isfinite(s)))} non-finite scores")
    return s


def evaluate(net: Network, scaler: Standardizer, dataset: Dataset, budget=None, model=None, alpha=0.05):
    """Metrics with confidence intervals on ``dataset``; PL when a budget and finance exist."""
    s = score(net, scaler, dataset)
    entities = None
    if budget is not None and dataset.finance is not None:
        entities = entity_table(dataset, s)
    return metrics.evaluate(s, dataset.y, model=model or net.spec.name, alpha=alpha, entities=entities, budget=budget)
