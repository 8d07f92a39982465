import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ats.core_math import Rng
from ats.evaluation import (
    compute_rsm,
    cohens_d,
    cross_rsm,
    episode_groups,
    evaluate_retrieval,
    make_report,
    mean_average_precision,
    rank_queries,
    ranks_from_scores,
    robustness,
    similarity_score,
    top_k_accuracy,
    write_robustness_csv,
)


def brute_force_ranks(scores, gt):
    """Sort every row by (-score, index) and find the ground-truth position."""
    out = []
    for i, row in enumerate(scores):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(order.index(gt[i]) + 1)
    return out


class TestRanks:
    def test_matches_brute_force_with_ties(self):
        for case in range(100):
            rng = Rng(case)
            n_q = 1 + int(rng.integers(1, 12))
            n_c = 1 + int(rng.integers(1, 12))
            # coarse integer scores force plenty of ties
            scores = rng.integers(0, 4, size=(n_q, n_c)).astype(float)
            gt = rng.integers(0, n_c, size=n_q)
            assert ranks_from_scores(scores, gt) == brute_force_ranks(scores.tolist(), gt.tolist())

    def test_embedding_ranks_match_brute_force(self):
        for case in range(20):
            rng = Rng(1000 + case)
            Zb = rng.normal(size=(8, 5))
            Zv = rng.normal(size=(8, 5))
            Zv[3] = Zv[1]  # duplicated candidate ties exactly
            gt = np.arange(8)
            a = Zb / np.linalg.norm(Zb, axis=1, keepdims=True)
            b = Zv / np.linalg.norm(Zv, axis=1, keepdims=True)
            assert rank_queries(Zb, Zv, gt) == brute_force_ranks((a @ b.T).tolist(), gt.tolist())

    def test_pessimistic_tie_break(self):
        scores = np.array([[1.0, 1.0, 1.0]])
        assert ranks_from_scores(scores, [0]) == [1]
        assert ranks_from_scores(scores, [2]) == [3]

    def test_bad_ground_truth(self):
        with pytest.raises(IndexError):
            ranks_from_scores(np.zeros((2, 3)), [0, 3])
        with pytest.raises(ValueError):
            ranks_from_scores(np.zeros((2, 3)), [0])

    @given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31))
    def test_rank_bounds(self, n_q, n_c, seed):
        rng = Rng(seed)
        ranks = ranks_from_scores(rng.normal(size=(n_q, n_c)), rng.integers(0, n_c, size=n_q))
        assert all(1 <= r <= n_c for r in ranks)


class TestMetrics:
    def test_map_hand_value(self):
        assert abs(mean_average_precision([1, 2, 4]) - 58.333333333333336) < 1e-9

    def test_top_k(self):
        assert top_k_accuracy([1, 2, 6, 5], 1) == 25.0
        assert top_k_accuracy([1, 2, 6, 5], 5) == 75.0
        with pytest.raises(ValueError):
            top_k_accuracy([1], 0)

    def test_empty_inputs_raise(self):
        with pytest.raises(ValueError):
            top_k_accuracy([], 1)
        with pytest.raises(ValueError):
            mean_average_precision([])
        with pytest.raises(ValueError):
            similarity_score(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_identical_similarity_is_exactly_one(self):
        for case in range(500):
            rng = Rng(case)
            z = rng.normal(size=(1 + case % 30, 16)) * (1 + case)
            assert similarity_score(z, z) == 1.0

    def test_similarity_range_and_shape(self):
        rng = Rng(3)
        a, b = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
        assert -1.0 <= similarity_score(a, b) <= 1.0
        assert similarity_score(a, -a) == -1.0
        with pytest.raises(ValueError):
            similarity_score(a, b[:5])

    @given(st.lists(st.integers(1, 50), min_size=1, max_size=30))
    def test_metric_monotonicity(self, ranks):
        assert top_k_accuracy(ranks, 1) <= top_k_accuracy(ranks, 5) <= 100.0
        assert 0.0 < mean_average_precision(ranks) <= 100.0

    def test_report_json_round_trip(self):
        import json

        rep = make_report([1, 3], 0.5, 4)
        d = json.loads(rep.to_json())
        assert d["top1"] == 50.0 and d["n_candidates"] == 4 and d["ranks"] == [1, 3]


class TestEpisodes:
    def test_groups_hold_one_image_per_class(self):
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
        image = np.array([0, 0, 0, 1, 1, 1, 2, 2])
        groups = episode_groups(labels, image)
        assert len(groups) == 2  # image 2 lacks class 2
        for g in groups:
            assert labels[g].tolist() == [0, 1, 2]

    def test_perfect_embeddings_rank_first(self):
        labels = np.repeat(np.arange(4), 3)
        image = np.tile(np.arange(3), 4)
        Z = Rng(5).normal(size=(12, 8))
        rep = evaluate_retrieval(Z, Z, labels, image)
        assert rep.top1 == 100.0 and rep.similarity == 1.0 and rep.n_candidates == 4

    def test_no_complete_episode(self):
        with pytest.raises(ValueError):
            evaluate_retrieval(np.ones((2, 2)), np.ones((2, 2)), [0, 1], [0, 1])


class TestRSM:
    def test_ordering_and_blocks(self):
        rng = Rng(7)
        labels = np.array([3, 1, 2, 0, 1, 3])
        groups = np.array([1, 0, 1, 0, 0, 1])
        Z = rng.normal(size=(6, 4))
        rsm = compute_rsm(Z, labels, groups)
        assert rsm.groups.tolist() == [0, 0, 0, 1, 1, 1]
        assert rsm.labels.tolist() == [0, 1, 1, 2, 3, 3]
        assert rsm.boundaries == [0, 3]
        np.testing.assert_allclose(np.diag(rsm.matrix), 1.0, atol=1e-12)

    def test_within_across_by_hand(self):
        # two tight clusters on orthogonal axes
        Z = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0]])
        rsm = compute_rsm(Z, [0, 0, 1, 1])
        within, across = rsm.within_across()
        c = 1.0 / np.sqrt(1.01)
        assert abs(within - c) < 1e-12
        assert abs(across - np.mean([0.0, 0.1 * c, 0.1 * c, 0.2 / 1.01])) < 1e-12
        assert rsm.margin() > 0

    def test_cross_rsm_shape(self):
        rng = Rng(8)
        rsm = cross_rsm(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), [0, 1, 0, 1, 2])
        assert rsm.matrix.shape == (5, 5)

    def test_csv(self, tmp_path):
        rsm = compute_rsm(Rng(9).normal(size=(3, 2)), [2, 0, 1])
        path = rsm.to_csv(tmp_path / "rsm.csv", digest="abc")
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_digest: abc"
        rows = list(csv.reader(lines[1:]))
        assert rows[0] == ["", "0", "1", "2"]
        np.testing.assert_array_equal(np.array([r[1:] for r in rows[1:]], dtype=float), rsm.matrix)


class TestRobustness:
    def test_hand_values(self):
        st_ = robustness([1.0, 2.0, 3.0])
        assert abs(st_.mean - 2.0) < 1e-12
        assert abs(st_.sd - 1.0) < 1e-12
        assert abs(st_.ci_low - (-0.484)) < 1e-3
        assert abs(st_.ci_high - 4.484) < 1e-3

    def test_cohens_d_hand_value(self):
        # n=6 with sample sd exactly 1 around each mean
        offs = np.array([-1, 1, -1, 1, -1, 1]) * np.sqrt(5.0 / 6.0)
        a, b = 10.0 + offs, 8.0 + offs
        assert abs(np.std(a, ddof=1) - 1.0) < 1e-12
        d, flag = cohens_d(a, b)
        assert not flag and abs(d - 2.0) < 1e-9
        assert abs(robustness(a, baseline=b).cohens_d - 2.0) < 1e-9

    def test_zero_variance_flag(self):
        d, flag = cohens_d([1.0, 1.0], [1.0, 1.0])
        assert flag and d == 0.0

    def test_too_few(self):
        with pytest.raises(ValueError):
            robustness([1.0])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=20))
    def test_ci_contains_mean(self, xs):
        r = robustness(xs)
        assert r.ci_low <= r.mean + 1e-9 and r.mean - 1e-9 <= r.ci_high

    def test_csv(self, tmp_path):
        path = write_robustness_csv({"a": robustness([1.0, 2.0, 3.0])}, tmp_path / "r.csv")
        rows = list(csv.reader(path.open()))
        assert rows[0][0] == "method" and rows[1][0] == "a" and rows[1][1] == "3"
