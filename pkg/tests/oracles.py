"""Independent brute-force reference implementations used by several test modules."""

import itertools
from fractions import Fraction
from math import comb


def roc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties worth one half."""
    scores, labels = [float(s) for s in scores], [int(y) for y in labels]
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            wins += 1 if p > n else Fraction(1, 2) if p == n else 0
    return wins / (len(pos) * len(neg))


def ap_steps(scores, labels):
    """Precision/recall step sum, one threshold per distinct score, highest first."""
    scores, labels = [float(s) for s in scores], [int(y) for y in labels]
    n_pos = sum(labels)
    total, prev_recall = Fraction(0), Fraction(0)
    for t in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(chosen)
        recall = Fraction(tp, n_pos)
        total += (recall - prev_recall) * Fraction(tp, len(chosen))
        prev_recall = recall
    return total


def binomial_tail(wins, n):
    return Fraction(sum(comb(n, j) for j in range(wins, n + 1)), 2**n)


def small_instances(max_n=12):
    """Every label vector of each size up to ``max_n`` under several score patterns.

    Patterns: a strict ranking, pairs of ties, three tie levels and a
    reversed strict ranking. Sizes up to 4 additionally enumerate every
    score vector over ``range(n)``, which covers all weak orderings.
    """
    for n in range(1, max_n + 1):
        patterns = [list(range(n)), [i // 2 for i in range(n)], [i % 3 for i in range(n)], list(range(n, 0, -1))]
        if n <= 4:
            patterns = [list(p) for p in itertools.product(range(n), repeat=n)]
        for scores in patterns:
            for labels in itertools.product((0, 1), repeat=n):
                yield [float(s) for s in scores], list(labels)


def w1_quantile(u, v):
    """W1 as the integral of |F_u^-1 - F_v^-1| over (0, 1), piecewise constant quantiles."""
    u, v = sorted(map(Fraction, u)), sorted(map(Fraction, v))
    cuts = sorted({Fraction(i, len(u)) for i in range(len(u) + 1)} | {Fraction(j, len(v)) for j in range(len(v) + 1)})
    total = Fraction(0)
    for a, b in zip(cuts, cuts[1:]):
        mid = (a + b) / 2
        qu = u[min(int(mid * len(u)), len(u) - 1)]
        qv = v[min(int(mid * len(v)), len(v) - 1)]
        total += (b - a) * abs(qu - qv)
    return total
