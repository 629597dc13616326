"""Assignment: cost construction, Kuhn-Munkres, and the brute-force oracle."""

import numpy as np
import pytest

from sparsedet import matching
from sparsedet.autodiff import ContractError
from sparsedet.exceptions import SizeError


class TestCostMatrix:
    def test_perfect_match_limit_has_near_zero_cost(self):
        box = np.array([[0.5, 0.5, 0.2, 0.2]])
        probs = np.array([[1.0 - 1e-9, 1e-9]])
        cost = matching.build_cost_matrix(probs, box, np.array([0]), box)
        assert cost.shape == (1, 1)
        assert cost[0, 0] < 1e-6

    def test_closer_box_is_cheaper(self):
        gt_box = np.array([[0.5, 0.5, 0.2, 0.2]])
        pred = np.array([[0.5, 0.5, 0.2, 0.2], [0.5, 0.6, 0.2, 0.2]])
        probs = np.full((2, 3), 0.5)
        cost = matching.build_cost_matrix(probs, pred, np.array([1]), gt_box)
        assert cost[0, 0] < cost[0, 1]

    def test_entries_finite_for_clamped_probabilities(self):
        rng = np.random.default_rng(0)
        probs = rng.choice([0.0, 1.0, 0.5], size=(8, 4))
        pred = np.concatenate(
            [rng.uniform(0, 1, (8, 2)), rng.uniform(0.01, 1, (8, 2))], axis=1
        )
        gt = np.concatenate(
            [rng.uniform(0, 1, (3, 2)), rng.uniform(0.01, 1, (3, 2))], axis=1
        )
        cost = matching.build_cost_matrix(probs, pred, np.array([0, 1, 2]), gt)
        assert np.all(np.isfinite(cost))

    def test_more_gt_than_proposals_rejected(self):
        probs = np.full((1, 2), 0.5)
        boxes = np.array([[0.5, 0.5, 0.2, 0.2]])
        gt = np.tile(boxes, (2, 1))
        with pytest.raises(ContractError):
            matching.build_cost_matrix(probs, boxes, np.array([0, 1]), gt)


class TestHungarian:
    def test_single_entry(self):
        res = matching.hungarian(np.array([[7.5]]))
        assert res.assignment == [(0, 0)]
        assert res.total_cost == 7.5

    def test_two_by_two_prefers_cross_assignment(self):
        res = matching.hungarian(np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert sorted(res.assignment) == [(0, 1), (1, 0)]
        assert res.total_cost == 4.0

    def test_matches_brute_force_on_random_squares(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            cost = rng.uniform(0, 10, (6, 6))
            h = matching.hungarian(cost)
            b = matching.brute_force_match(cost)
            assert abs(h.total_cost - b.total_cost) < 1e-9

    def test_matches_brute_force_on_random_rectangles(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            g = int(rng.integers(1, 8))
            n = int(rng.integers(g, 11))
            cost = rng.uniform(0, 10, (g, n))
            h = matching.hungarian(cost)
            b = matching.brute_force_match(cost)
            assert abs(h.total_cost - b.total_cost) < 1e-9

    def test_constant_shift_preserves_assignment(self):
        rng = np.random.default_rng(3)
        cost = rng.uniform(0, 10, (4, 6))
        base = matching.hungarian(cost).assignment
        shifted = matching.hungarian(cost + 123.0).assignment
        assert base == shifted

    def test_column_permutation_permutes_assignment(self):
        rng = np.random.default_rng(4)
        cost = rng.uniform(0, 10, (3, 5))
        perm = rng.permutation(5)
        base = dict(matching.hungarian(cost).assignment)
        permuted = dict(matching.hungarian(cost[:, perm]).assignment)
        for g, col in permuted.items():
            assert perm[col] == base[g]

    def test_rejects_non_finite_cost(self):
        with pytest.raises(ContractError):
            matching.hungarian(np.array([[np.inf, 1.0]]))

    def test_empty_matrix(self):
        res = matching.hungarian(np.zeros((0, 5)))
        assert res.assignment == [] and res.total_cost == 0.0


class TestBruteForce:
    def test_one_by_two(self):
        res = matching.brute_force_match(np.array([[3.0, 1.0]]))
        assert res.assignment == [(0, 1)]
        assert res.total_cost == 1.0

    def test_two_by_three(self):
        res = matching.brute_force_match(np.array([[1.0, 9.0, 9.0], [9.0, 1.0, 9.0]]))
        assert res.assignment == [(0, 0), (1, 1)]
        assert res.total_cost == 2.0

    def test_lexicographic_tie_break(self):
        res = matching.brute_force_match(np.ones((2, 3)))
        assert res.assignment == [(0, 0), (1, 1)]

    def test_size_limit(self):
        with pytest.raises(SizeError):
            matching.brute_force_match(np.zeros((9, 12)))
