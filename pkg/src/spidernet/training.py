"""Adam with grouped L2 decay, fraud-rate leveled batches, early stopping and grid search."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from spidernet import engine, metrics
from spidernet.architectures import Network
from spidernet.engine import ShapeError

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    l2_batch: float = 0.0001
    batch_size: int = 256
    target_fraud_rate: float = 0.1
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.target_fraud_rate < 1.0:
            raise ValueError("target_fraud_rate must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def decay_for(self, group):
        if group in ("conv_weight", "dense_weight"):
            return self.weight_decay
        if group == "batchnorm_gain":
            return self.l2_batch
        return 0.0

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def adam_step(params, config: TrainConfig, t):
    """One Adam update with bias correction; L2 decay is added to the gradient per group."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name}")
        g = p.grad
        lam = config.decay_for(p.decay_group)
        if lam:
            g = g + lam * p.value
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * g * g
        p.value -= config.learning_rate * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + config.adam_eps)
    return params


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def leveled_batches(labels, batch_size, target_fraud_rate=0.0, rng=0):
    """Index batches for one epoch with at least ceil(r * B) positives in each.

    Negatives are visited once, without replacement. Positives fill
    ``m = max(ceil(r * B), ceil(B * prevalence))`` slots per batch, cycling
    through reshuffled passes over the positives, so they repeat (are drawn
    with replacement across passes) when they are scarce. With ``r = 0`` this
    is plain shuffled batching over every record exactly once.
    """
    labels = np.asarray(labels)
    rng = _rng(rng)
    n = labels.size
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 0.0 <= target_fraud_rate < 1.0:
        raise ValueError("target_fraud_rate must be in [0, 1)")
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels != 1)[0]
    if target_fraud_rate == 0.0:
        order = rng.permutation(n)
        batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    else:
        if pos.size == 0:
            raise ValueError("fraud-rate leveling needs at least one positive record")
        m = max(math.ceil(target_fraud_rate * batch_size), math.ceil(batch_size * pos.size / n))
        if neg.size:
            m = min(m, batch_size - 1)
        m = min(m, batch_size)
        neg_order = rng.permutation(neg)
        per = batch_size - m
        n_batches = max(1, math.ceil(neg.size / per)) if per else max(1, math.ceil(pos.size / m))
        pos_stream = []
        while len(pos_stream) < n_batches * m:
            pos_stream.extend(rng.permutation(pos).tolist())
        batches = []
        for b in range(n_batches):
            chunk = np.concatenate([neg_order[b * per : (b + 1) * per], pos_stream[b * m : (b + 1) * m]]).astype(np.int64)
            batches.append(rng.permutation(chunk))
    # batchnorm cannot normalize a single example
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    yield from batches


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    initial_loss: float = float("nan")

    @property
    def best(self):
        return self.epochs[self.best_epoch - 1] if self.best_epoch else None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def mean_loss(net: Network, X, y, batch_size=1024):
    total = 0.0
    for i in range(0, len(y), batch_size):
        loss, _ = engine.softmax_cross_entropy(net.forward(X[i : i + batch_size], train=False), y[i : i + batch_size])
        total += loss * len(y[i : i + batch_size])
    return total / len(y)


def validation_scores(net: Network, X, y):
    probs = net.predict_proba(X)[:, 1]
    return metrics.auc_pr(probs, y), metrics.auc_roc(probs, y)


def train(net: Network, data_splits, config: TrainConfig, on_epoch=None):
    """Train with early stopping on validation AUC-PR; ``net`` ends at the best epoch.

    ``data_splits`` is ``((X_train, y_train), (X_val, y_val))`` with inputs of
    shape (n, L). Returns ``(best_state, history)``.
    """
    (X_tr, y_tr), (X_va, y_va) = data_splits
    X_tr = np.asarray(X_tr, dtype=np.float64)
    X_va = np.asarray(X_va, dtype=np.float64)
    y_tr = np.asarray(y_tr).astype(np.int64)
    y_va = np.asarray(y_va).astype(np.int64)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory(initial_loss=mean_loss(net, X_tr, y_tr))
    best_state = net.state_dict()
    best_pr = -np.inf
    stale = 0
    t = 0
    for epoch in range(1, config.max_epochs + 1):
        seen, loss_sum = 0, 0.0
        for idx in leveled_batches(y_tr, config.batch_size, config.target_fraud_rate, rng):
            net.zero_grad()
            logits = net.forward(X_tr[idx], train=True, rng=rng)
            loss, grad = engine.softmax_cross_entropy(logits, y_tr[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {t + 1}")
            net.backward(grad)
            t += 1
            adam_step(net.params, config, t)
            loss_sum += loss * len(idx)
            seen += len(idx)
        pr, roc = validation_scores(net, X_va, y_va)
        record = {"epoch": epoch, "train_loss": loss_sum / seen, "val_auc_pr": pr, "val_auc_roc": roc}
        history.epochs.append(record)
        log.info("epoch %d loss %.5f val AUC-PR %.4f AUC-ROC %.4f", epoch, record["train_loss"], pr, roc)
        if on_epoch:
            on_epoch(record)
        if pr > best_pr:
            best_pr, stale = pr, 0
            history.best_epoch = epoch
            best_state = net.state_dict()
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break
    net.load_state_dict(best_state)
    return best_state, history


TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"grid"}


def grid_search(arch_builder, space, data_splits, config: TrainConfig):
    """Train every combination of ``space`` and rank by validation AUC-PR.

    Keys naming :class:`TrainConfig` fields override the training config;
    the rest are passed to ``arch_builder``. Ranking is by AUC-PR, then
    AUC-ROC (both descending), then enumeration order; combinations that
    fail to build or train are kept as ``failed`` rows at the bottom.
    """
    if not space:
        raise ValueError("grid search space is empty")
    keys = sorted(space)
    combos = list(itertools.product(*(list(space[k]) for k in keys)))
    if not combos:
        raise ValueError("grid search space is empty")
    rows = []
    for i, values in enumerate(combos):
        combo = dict(zip(keys, values))
        row = {"index": i, "params": combo}
        try:
            cfg = replace(config, **{k: v for k, v in combo.items() if k in TRAIN_KEYS})
            spec = arch_builder(**{k: v for k, v in combo.items() if k not in TRAIN_KEYS})
            net = Network(spec, seed=cfg.seed)
            _, hist = train(net, data_splits, cfg)
            best = hist.best
            row.update(status="ok", val_auc_pr=best["val_auc_pr"], val_auc_roc=best["val_auc_roc"],
                       best_epoch=hist.best_epoch)
        except (ValueError, TypeError, ShapeError, NumericalError) as exc:
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: (-r["val_auc_pr"], -r["val_auc_roc"], r["index"]))
    failed = [r for r in rows if r["status"] != "ok"]
    leaderboard = ok + failed
    best = ok[0]["params"] if ok else None
    return best, leaderboard
