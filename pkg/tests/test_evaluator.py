import math

import numpy as np
import pytest

from mdvt.evaluator import (convergence_summary, evaluate_rankings,
                            ndcg_at_k, rank_items, recall_at_k,
                            sparsity_breakdown, SPARSITY_BUCKETS)
from mdvt.trainer import TrainHistory


# Definitional brute-force metrics, in the style of a hand-rolled harness.

def brute_recall(ranked, relevant, k):
    hits = 0
    for item in list(ranked)[:k]:
        if item in relevant:
            hits += 1
    return hits / len(relevant)


def brute_ndcg(ranked, relevant, k):
    dcg = 0.0
    for position, item in enumerate(list(ranked)[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log(position + 1, 2)
    idcg = 0.0
    for position in range(1, min(k, len(relevant)) + 1):
        idcg += 1.0 / math.log(position + 1, 2)
    return dcg / idcg


class TestRankItems:
    def test_descending_order(self):
        got = rank_items(np.array([0.1, 0.9, 0.5]))
        assert got.tolist() == [1, 2, 0]

    def test_mask_removed_before_ranking(self):
        got = rank_items(np.array([0.1, 0.9, 0.5]), masked={1})
        assert got.tolist() == [2, 0]

    def test_ties_by_index(self):
        got = rank_items(np.array([0.5, 0.5]))
        assert got.tolist() == [0, 1]

    def test_masked_items_never_appear(self, rng):
        for _ in range(100):
            n = int(rng.integers(3, 30))
            scores = rng.normal(size=n)
            masked = {int(i) for i in
                      rng.choice(n, size=int(rng.integers(0, n)),
                                 replace=False)}
            ranked = rank_items(scores, masked)
            assert not set(ranked.tolist()) & masked
            assert len(ranked) == n - len(masked)


class TestRecall:
    def test_hit_at_rank_one(self):
        assert recall_at_k(np.array([7, 1, 2]), {7}, 5) == 1.0

    def test_partial_hit(self):
        assert recall_at_k(np.array([7, 1, 2]), {7, 9}, 3) == 0.5

    def test_miss_below_cutoff(self):
        assert recall_at_k(np.array([1, 2, 3]), {3}, 2) == 0.0

    def test_empty_relevant_rejected(self):
        with pytest.raises(ValueError):
            recall_at_k(np.array([1]), set(), 1)


class TestNdcg:
    def test_relevant_at_rank_one(self):
        assert ndcg_at_k(np.array([4, 1]), {4}, 2) == pytest.approx(1.0)

    def test_relevant_at_rank_two(self):
        got = ndcg_at_k(np.array([1, 4]), {4}, 2)
        assert got == pytest.approx(0.63093, abs=1e-5)

    def test_no_hit_is_zero(self):
        assert ndcg_at_k(np.array([1, 2]), {9}, 2) == 0.0

    def test_perfect_prefix_is_one(self):
        assert ndcg_at_k(np.array([3, 5, 1]), {3, 5}, 2) == pytest.approx(1.0)


class TestMetricOracle:
    def test_1000_random_cases(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 30))
            scores = rng.normal(size=n)
            ranked = rank_items(scores)
            relevant = {int(i) for i in
                        rng.choice(n, size=int(rng.integers(1, n)),
                                   replace=False)}
            k = int(rng.integers(1, 15))
            assert recall_at_k(ranked, relevant, k) == pytest.approx(
                brute_recall(ranked.tolist(), relevant, k), abs=1e-12)
            assert ndcg_at_k(ranked, relevant, k) == pytest.approx(
                brute_ndcg(ranked.tolist(), relevant, k), abs=1e-12)

    def test_bounds_and_k_monotonicity(self, rng):
        for _ in range(200):
            n = int(rng.integers(12, 30))
            ranked = rank_items(rng.normal(size=n))
            relevant = {int(i) for i in
                        rng.choice(n, size=int(rng.integers(1, 6)),
                                   replace=False)}
            r5 = recall_at_k(ranked, relevant, 5)
            r10 = recall_at_k(ranked, relevant, 10)
            n5 = ndcg_at_k(ranked, relevant, 5)
            n10 = ndcg_at_k(ranked, relevant, 10)
            assert 0.0 <= r5 <= r10 <= 1.0
            assert 0.0 <= n5 <= 1.0 and 0.0 <= n10 <= 1.0


class TestEvaluateRankings:
    def scores(self, chunk):
        table = np.array([
            [0.9, 0.8, 0.1, 0.0],
            [0.0, 0.1, 0.8, 0.9],
            [0.5, 0.5, 0.5, 0.5],
        ])
        return table[chunk]

    def test_averages_over_users(self):
        relevant = {0: {0}, 1: {3}}
        masked = {0: set(), 1: set()}
        report = evaluate_rankings(self.scores, [0, 1], relevant, masked,
                                   (1, 2))
        assert report.num_users_evaluated == 2
        assert report.recall[1] == pytest.approx(1.0)

    def test_masking_changes_ranking(self):
        relevant = {0: {1}}
        report = evaluate_rankings(self.scores, [0], relevant, {0: {0}},
                                   (1,))
        assert report.recall[1] == pytest.approx(1.0)

    def test_users_without_relevant_skipped(self):
        report = evaluate_rankings(self.scores, [0, 2], {0: {0}, 2: set()},
                                   {0: set(), 2: set()}, (1,))
        assert report.num_users_evaluated == 1

    def test_global_equals_weighted_bucket_mean(self, rng):
        users = list(range(40))
        scores = rng.normal(size=(40, 12))
        relevant = {u: {int(rng.integers(12))} for u in users}
        masked = {u: set() for u in users}
        counts = rng.integers(1, 30, size=40)
        report = evaluate_rankings(lambda c: scores[c], users, relevant,
                                   masked, (5, 10), counts)
        for k in (5, 10):
            total = 0.0
            weight = 0
            for bucket in report.buckets:
                if bucket.count:
                    total += bucket.ndcg[k] * bucket.count
                    weight += bucket.count
            assert weight == report.num_users_evaluated
            assert total / weight == pytest.approx(report.ndcg[k], abs=1e-12)


class TestSparsityBreakdown:
    def test_bucket_edges(self):
        assert SPARSITY_BUCKETS[0] == (1, 5)
        assert SPARSITY_BUCKETS[1] == (6, 10)
        per_user = {0: {10: (1.0, 1.0)}, 1: {10: (0.0, 0.0)},
                    2: {10: (0.5, 0.5)}}
        counts = np.array([3, 6, 25])
        buckets = sparsity_breakdown(per_user, counts, (10,))
        assert buckets[0].count == 1 and buckets[0].recall[10] == 1.0
        assert buckets[1].count == 1
        assert buckets[3].count == 1

    def test_empty_bucket_null_metrics(self):
        buckets = sparsity_breakdown({0: {10: (1.0, 1.0)}}, np.array([2]),
                                     (10,))
        empty = buckets[2]
        assert empty.count == 0
        assert empty.recall[10] is None and empty.ndcg[10] is None


class TestConvergenceSummary:
    def history(self, best, stop):
        h = TrainHistory()
        h.l_bpr = [1.0] * (stop + 1)
        h.l_total = [1.0] * (stop + 1)
        h.best_epoch = best
        h.stopped_epoch = stop
        return h

    def test_best_and_stop(self):
        rows = convergence_summary([self.history(29, 49)])
        assert rows[0]["epochs_to_best"] == 30
        assert rows[0]["epochs_to_stop"] == 50

    def test_one_row_per_run(self):
        rows = convergence_summary([self.history(0, 1), self.history(2, 3)])
        assert [r["run"] for r in rows] == [0, 1]

    def test_single_epoch_run(self):
        rows = convergence_summary([self.history(0, 0)])
        assert rows[0]["epochs_to_best"] == 1
        assert rows[0]["epochs_to_stop"] == 1
