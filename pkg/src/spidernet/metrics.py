"""Ranking metrics, asymptotic confidence intervals, Prevented Loss and the sign test."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from math import comb
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm, rankdata


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length ({scores.size} vs {labels.size})")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auc_roc(scores, labels):
    """Area under the ROC curve as the Mann-Whitney statistic (ties count one half)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks on ties, all half-integers
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels):
    """Average precision: sum of (R_i - R_{i-1}) * P_i over distinct score thresholds."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("auc_pr needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    last = np.r_[s[1:] != s[:-1], True]  # last index of each tied group
    tp_at = tp[last]
    k_at = np.nonzero(last)[0] + 1
    d_tp = np.diff(np.r_[0, tp_at])
    # exact rational sum, rounded once; cheap because only thresholds that add positives contribute
    hit = d_tp > 0
    total = sum(
        (Fraction(int(d) * int(t), int(k)) for d, t, k in zip(d_tp[hit], tp_at[hit], k_at[hit])),
        Fraction(0),
    )
    return float(total / n_pos)


class Interval(NamedTuple):
    lo: float
    hi: float
    degenerate: bool = False


def hanley_mcneil_se(auc, n_pos, n_neg):
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc * auc / (1.0 + auc)
    var = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc * auc) + (n_neg - 1) * (q2 - auc * auc)) / (n_pos * n_neg)
    return float(np.sqrt(max(var, 0.0)))


def auc_ci(value, n_pos, n_neg, alpha=0.05, kind="roc"):
    """Asymptotic (1 - alpha) interval for AUC-ROC or average precision.

    ROC uses the Hanley-McNeil standard error with a normal quantile. PR
    uses the logit interval: the binomial-style standard error
    ``sqrt(AP (1 - AP) / n_pos)`` carried to the logit scale by the delta
    method, i.e. ``1 / sqrt(n_pos AP (1 - AP))``, and mapped back.
    """
    if n_pos < 1 or n_neg < 1:
        raise ValueError("n_pos and n_neg must be >= 1")
    if kind not in ("roc", "pr"):
        raise ValueError(f"kind must be 'roc' or 'pr', got {kind!r}")
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"AUC value must be in [0, 1], got {value}")
    if value in (0.0, 1.0):
        return Interval(value, value, True)
    z = norm.ppf(1 - alpha / 2)
    if kind == "roc":
        se = hanley_mcneil_se(value, n_pos, n_neg)
        return Interval(max(0.0, value - z * se), min(1.0, value + z * se))
    eta = np.log(value / (1 - value))
    tau = 1.0 / np.sqrt(n_pos * value * (1 - value))
    lo, hi = (expit(eta + sgn * z * tau) for sgn in (-1, 1))
    return Interval(float(lo), float(hi))


# ---------------------------------------------------------------------------
# Prevented Loss


@dataclass
class ScoredEntity:
    entity_id: str
    score: float
    label: int
    portfolio: float = 0.0
    default_rate: float = 0.0
    zero_target_rate: float = 0.0

    def __post_init__(self):
        self.entity_id = str(self.entity_id)
        self.score, self.label = float(self.score), int(self.label)
        self.portfolio, self.default_rate = float(self.portfolio), float(self.default_rate)
        self.zero_target_rate = float(self.zero_target_rate)
        if self.zero_target_rate >= 1:
            raise ValueError("zero-target default rate must be < 1")
        if self.portfolio < 0:
            raise ValueError("portfolio must be non-negative")


def _decimal(x):
    # money and rates are decimal quantities: use the shortest decimal that round-trips the float
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"financial value must be finite, got {x}")
    return Fraction(str(x))


def _pl_exact(portfolio, default_rate, zero_target_rate):
    if zero_target_rate >= 1:
        raise ValueError("zero-target default rate must be < 1")
    dr0 = _decimal(zero_target_rate)
    return _decimal(portfolio) * (_decimal(default_rate) - dr0) / (1 - dr0)


def prevented_loss_entity(portfolio, default_rate, zero_target_rate):
    """Loss prevented by catching one partner early; negative when DR < DR0.

    Inputs are read as the decimals they print as, the arithmetic is exact
    and the result is rounded once, so 90000 * (0.55 - 0.1) / 0.9 is 45000.
    """
    return float(_pl_exact(portfolio, default_rate, zero_target_rate))


def top_k(entities: Sequence[ScoredEntity], k):
    """Highest-scored entities; equal scores are ordered by entity id."""
    if k < 1:
        raise ValueError("budget k must be >= 1")
    return sorted(entities, key=lambda e: (-e.score, str(e.entity_id)))[:k]


def total_pl(entities: Sequence[ScoredEntity], k=40):
    """Prevented Loss summed over the fraud entities among the top-k scored."""
    total = sum(
        (_pl_exact(e.portfolio, e.default_rate, e.zero_target_rate) for e in top_k(entities, k) if e.label),
        Fraction(0),
    )
    return float(total)


def fraud_detected(entities: Sequence[ScoredEntity], k=40):
    return int(sum(e.label for e in top_k(entities, k)))


# ---------------------------------------------------------------------------
# sign test


def sign_test(wins, n):
    """One-sided exact sign test p-value P(X >= wins) for X ~ Binomial(n, 1/2)."""
    if not 0 <= wins <= n:
        raise ValueError(f"need 0 <= wins <= n, got wins={wins}, n={n}")
    tail = sum(comb(n, j) for j in range(wins, n + 1))
    return float(Fraction(tail, 2**n))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    model: str
    auc_roc: float
    auc_roc_ci: tuple
    auc_pr: float
    auc_pr_ci: tuple
    n_pos: int
    n_neg: int
    budget: int | None = None
    pl_total: float | None = None
    fraud_detected: int | None = None
    pl_per_entity: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def metrics(self):
        """Scalar quality metrics where larger is better, for pairwise comparison."""
        out = {"auc_pr": self.auc_pr, "auc_roc": self.auc_roc}
        if self.pl_total is not None:
            out["pl"] = self.pl_total
        if self.fraud_detected is not None:
            out["fraud_detected"] = float(self.fraud_detected)
        return out

    def to_dict(self):
        d = asdict(self)
        d["auc_roc_ci"] = list(self.auc_roc_ci)
        d["auc_pr_ci"] = list(self.auc_pr_ci)
        d["metrics"] = self.metrics()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "metrics"}
        d["auc_roc_ci"] = tuple(d["auc_roc_ci"])
        d["auc_pr_ci"] = tuple(d["auc_pr_ci"])
        return cls(**d)


def evaluate(scores, labels, model="model", alpha=0.05, entities=None, budget=None):
    """Build an :class:`EvalReport`; PL is included when entities and a budget are given."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    roc = auc_roc(scores, labels)
    pr = auc_pr(scores, labels)
    report = EvalReport(
        model=model,
        auc_roc=roc,
        auc_roc_ci=tuple(auc_ci(roc, n_pos, n_neg, alpha, "roc")[:2]),
        auc_pr=pr,
        auc_pr_ci=tuple(auc_ci(pr, n_pos, n_neg, alpha, "pr")[:2]),
        n_pos=n_pos,
        n_neg=n_neg,
    )
    if entities is not None and budget is not None:
        chosen = top_k(entities, budget)
        report.budget = int(budget)
        report.pl_total = total_pl(entities, budget)
        report.fraud_detected = fraud_detected(entities, budget)
        report.pl_per_entity = [
            {
                "entity_id": e.entity_id,
                "score": e.score,
                "label": e.label,
                "pl": prevented_loss_entity(e.portfolio, e.default_rate, e.zero_target_rate),
            }
            for e in chosen
        ]
    return report


def compare_reports(a: EvalReport | dict, b: EvalReport | dict):
    """Count strict metric-wise wins of ``a`` over ``b`` and the sign-test p-value."""
    ma = a.metrics() if isinstance(a, EvalReport) else dict(a)
    mb = b.metrics() if isinstance(b, EvalReport) else dict(b)
    shared = sorted(set(ma) & set(mb))
    if not shared:
        raise ValueError("reports share no metric keys")
    wins = sum(1 for k in shared if ma[k] > mb[k])
    return {"metrics": shared, "wins": wins, "n": len(shared), "p_value": sign_test(wins, len(shared))}


def render_table(reports: Sequence[EvalReport]):
    """Plain-text comparison table: model, AUC PR (± CI), AUC ROC (± CI)[, Fraud, PL]."""
    with_pl = any(r.pl_total is not None for r in reports)
    header = ["#", "Model", "AUC PR (± CI)", "AUC ROC (± CI)"]
    if with_pl:
        header += ["Fraud, #", "PL"]
    rows = []
    for i, r in enumerate(reports, start=1):
        pr_half = (r.auc_pr_ci[1] - r.auc_pr_ci[0]) / 2
        roc_half = (r.auc_roc_ci[1] - r.auc_roc_ci[0]) / 2
        row = [str(i), r.model, f"{r.auc_pr:.4f} (±{pr_half:.6f})", f"{r.auc_roc:.4f} (±{roc_half:.6f})"]
        if with_pl:
            row += ["-" if r.fraud_detected is None else str(r.fraud_detected),
                    "-" if r.pl_total is None else f"{r.pl_total:,.0f}"]
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines)
