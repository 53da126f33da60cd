import json
import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_steps, binomial_tail, roc_pairs, small_instances
from spidernet import metrics as M
from spidernet.metrics import ScoredEntity


class TestAucRoc:
    def test_examples(self):
        assert M.auc_roc([0.9, 0.1], [1, 0]) == 1.0
        assert M.auc_roc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5
        assert M.auc_roc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            M.auc_roc([0.1, 0.2], [1, 1])

    def test_exhaustive_small(self):
        for scores, labels in small_instances(12):
            if 0 < sum(labels) < len(labels):
                assert M.auc_roc(scores, labels) == float(roc_pairs(scores, labels))

    @pytest.mark.parametrize("seed", range(10))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.standard_normal(200)
        y = rng.integers(0, 2, 200)
        base = M.auc_roc(s, y)
        assert M.auc_roc(np.exp(s), y) == base
        assert M.auc_roc(3.0 * s + 7.0, y) == base

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=60, unique=True), st.randoms(use_true_random=False))
    def test_label_flip_complements(self, scores, r):
        labels = [r.randint(0, 1) for _ in scores]
        labels[0], labels[1] = 0, 1
        assert M.auc_roc(scores, labels) + M.auc_roc(scores, [1 - y for y in labels]) == pytest.approx(1.0, abs=1e-15)


class TestAucPr:
    def test_examples(self):
        assert M.auc_pr([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
        assert M.auc_pr([0.9, 0.1], [0, 1]) == 0.5

    def test_no_positive(self):
        with pytest.raises(ValueError):
            M.auc_pr([0.1, 0.2], [0, 0])

    def test_exhaustive_small(self):
        for scores, labels in small_instances(12):
            if sum(labels):
                assert M.auc_pr(scores, labels) == float(ap_steps(scores, labels))

    def test_random_scores_near_prevalence(self):
        rng = np.random.default_rng(0)
        y = (rng.random(100_000) < 0.1).astype(int)
        assert abs(M.auc_pr(rng.random(100_000), y) - y.mean()) < 0.02

    @pytest.mark.parametrize("seed", range(20))
    def test_random_medium_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 300))
        s = np.round(rng.random(n), 2)
        y = rng.integers(0, 2, n)
        y[0] = 1
        assert M.auc_pr(s, y) == float(ap_steps(list(s), list(y)))


class TestConfidenceIntervals:
    def test_hanley_mcneil_hand_value(self):
        a, n1, n2 = 0.5, 100, 100
        q1, q2 = a / (2 - a), 2 * a * a / (1 + a)
        se = math.sqrt((a * (1 - a) + (n1 - 1) * (q1 - a * a) + (n2 - 1) * (q2 - a * a)) / (n1 * n2))
        z = NormalDist().inv_cdf(0.975)
        lo, hi, degenerate = M.auc_ci(0.5, 100, 100, kind="roc")
        assert not degenerate
        assert abs(lo - (0.5 - z * se)) < 1e-9 and abs(hi - (0.5 + z * se)) < 1e-9

    def test_pr_logit_hand_value(self):
        ap, n = 0.3, 50
        z = NormalDist().inv_cdf(0.975)
        tau = math.sqrt(ap * (1 - ap) / n) / (ap * (1 - ap))
        logit = math.log(ap / (1 - ap))
        lo, hi, _ = M.auc_ci(ap, n, 500, kind="pr")
        assert abs(lo - 1 / (1 + math.exp(-(logit - z * tau)))) < 1e-12
        assert abs(hi - 1 / (1 + math.exp(-(logit + z * tau)))) < 1e-12

    @pytest.mark.parametrize("kind", ["roc", "pr"])
    def test_width_shrinks_with_sample_size(self, kind):
        widths = [np.subtract(*M.auc_ci(0.7, n, 10 * n, kind=kind)[:2][::-1]) for n in (5, 20, 80, 320)]
        assert all(a > b for a, b in zip(widths, widths[1:]))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), st.integers(1, 500), st.integers(1, 500), st.sampled_from(["roc", "pr"]))
    def test_interval_brackets_value_inside_unit(self, v, n_pos, n_neg, kind):
        lo, hi, _ = M.auc_ci(v, n_pos, n_neg, kind=kind)
        assert 0.0 <= lo <= v <= hi <= 1.0

    def test_degenerate_flag(self):
        assert M.auc_ci(1.0, 5, 5) == (1.0, 1.0, True)
        assert M.auc_ci(0.0, 5, 5, kind="pr").degenerate

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            M.auc_ci(0.5, 0, 5)
        with pytest.raises(ValueError):
            M.auc_ci(0.5, 5, 5, kind="brier")


def ent(i, score, label, p=0.0, dr=0.0, dr0=0.0):
    return ScoredEntity(str(i), score, label, p, dr, dr0)


# hand-made fixture: PL_i = P (DR - DR0) / (1 - DR0)
#   a: 90000 (0.55 - 0.1) / 0.9 = 45000.00   fraud, score 0.9
#   b: 20000 (0.30 - 0.2) / 0.8 =  2500.00   fraud, score 0.8
#   c: 50000 (0.05 - 0.1) / 0.9 = -2777.78   not fraud, score 0.7
#   d: 10000 (0.40 - 0.0) / 1.0 =  4000.00   fraud, score 0.6
#   e: 75000 (0.15 - 0.1) / 0.9 =  4166.67   fraud, score 0.2
FIXTURE = [
    ent("c", 0.7, 0, 50000, 0.05, 0.1),
    ent("a", 0.9, 1, 90000, 0.55, 0.1),
    ent("e", 0.2, 1, 75000, 0.15, 0.1),
    ent("b", 0.8, 1, 20000, 0.30, 0.2),
    ent("d", 0.6, 1, 10000, 0.40, 0.0),
]


class TestPreventedLoss:
    def test_equation_fixture(self):
        assert M.prevented_loss_entity(90000, 0.55, 0.1) == 45000.0

    def test_reductions(self):
        assert M.prevented_loss_entity(1234.5, 0.2, 0.2) == 0.0
        assert M.prevented_loss_entity(1000, 0.37, 0.0) == 370.0
        assert M.prevented_loss_entity(1000, 0.05, 0.1) < 0

    def test_zero_target_bound(self):
        with pytest.raises(ValueError):
            M.prevented_loss_entity(1, 0.5, 1.0)

    @pytest.mark.parametrize("k,expected", [(1, 45000.00), (2, 47500.00), (3, 47500.00), (4, 51500.00), (5, 55666.67)])
    def test_total_to_the_cent(self, k, expected):
        assert round(M.total_pl(FIXTURE, k), 2) == expected

    def test_no_fraud_in_budget(self):
        assert M.total_pl([ent(1, 0.9, 0, 1000, 0.5, 0.1), ent(2, 0.1, 1, 1000, 0.5, 0.1)], 1) == 0.0

    def test_budget_beyond_population(self):
        ents = [ent(i, 0.1 * i, 1, 1000 * i, 0.5, 0.1) for i in range(1, 5)]
        assert M.total_pl(ents, 40) == pytest.approx(sum(M.prevented_loss_entity(1000 * i, 0.5, 0.1) for i in range(1, 5)))

    def test_ties_broken_by_entity_id(self):
        ents = [ent("b", 0.5, 1, 1000, 0.5, 0.0), ent("a", 0.5, 1, 2000, 0.5, 0.0)]
        assert M.total_pl(ents, 1) == 1000.0
        assert [e.entity_id for e in M.top_k(ents, 2)] == ["a", "b"]

    def test_fraud_detected(self):
        assert M.fraud_detected(FIXTURE, 3) == 2

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1), st.floats(0, 1e6), st.floats(0.1, 1)),
                    min_size=1, max_size=30), st.randoms(use_true_random=False))
    def test_order_invariance_and_monotone_budget(self, rows, r):
        ents = [ent(i, s, y, p, dr, 0.1) for i, (s, y, p, dr) in enumerate(rows)]
        shuffled = list(ents)
        r.shuffle(shuffled)
        values = [M.total_pl(ents, k) for k in range(1, len(ents) + 2)]
        assert values == [M.total_pl(shuffled, k) for k in range(1, len(ents) + 2)]
        assert all(a <= b for a, b in zip(values, values[1:]))


class TestSignTest:
    def test_values(self):
        assert M.sign_test(6, 6) == 0.015625
        assert M.sign_test(0, 6) == 1.0
        assert M.sign_test(5, 6) == 0.109375

    @pytest.mark.parametrize("n", range(1, 30))
    def test_against_binomial_tail(self, n):
        assert M.sign_test(0, n) == 1.0
        assert M.sign_test(n, n) == 2.0**-n
        for w in range(n + 1):
            assert M.sign_test(w, n) == float(binomial_tail(w, n))

    def test_bounds(self):
        with pytest.raises(ValueError):
            M.sign_test(7, 6)


class TestReports:
    def test_evaluate_with_budget(self):
        rng = np.random.default_rng(0)
        s = rng.random(40)
        y = (s + rng.normal(0, 0.3, 40) > 0.6).astype(int)
        ents = [ent(i, s[i], y[i], 1000.0, 0.5, 0.1) for i in range(40)]
        rep = M.evaluate(s, y, model="m", entities=ents, budget=5)
        assert rep.auc_roc == M.auc_roc(s, y) and rep.auc_pr == M.auc_pr(s, y)
        assert rep.auc_roc_ci[0] <= rep.auc_roc <= rep.auc_roc_ci[1]
        assert rep.pl_total == M.total_pl(ents, 5) and len(rep.pl_per_entity) == 5
        back = M.EvalReport.from_dict(json.loads(rep.to_json()))
        assert back == rep

    def test_constant_scores(self):
        rep = M.evaluate(np.full(10, 0.3), [0, 1] * 5)
        assert rep.auc_roc == 0.5

    def test_compare(self):
        a = {f"m{i}": 1.0 for i in range(6)}
        b = {f"m{i}": 0.5 for i in range(6)}
        assert M.compare_reports(a, b)["p_value"] == 0.015625
        same = M.compare_reports(a, a)
        assert same["wins"] == 0 and same["p_value"] == 1.0
        five = dict(b, m0=2.0)
        assert M.compare_reports(a, five)["p_value"] == 0.109375
        with pytest.raises(ValueError):
            M.compare_reports({"x": 1.0}, {"y": 1.0})

    def test_table_layout(self):
        rep = M.evaluate([0.9, 0.2, 0.7, 0.1], [1, 0, 1, 0], model="SpiderNet-6")
        table = M.render_table([rep])
        assert "AUC PR (± CI)" in table.splitlines()[0] and "AUC ROC (± CI)" in table.splitlines()[0]
        assert "SpiderNet-6" in table
