"""Hungarian matcher: oracle equality, tie-breaking, cost matrix assembly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deco.matching import (Assignment, CostWeights, MatchingError,
                           hungarian_assign, hungarian_bruteforce,
                           matching_cost)


def assert_same_assignment(cost):
    fast = hungarian_assign(cost)
    slow = hungarian_bruteforce(cost)
    assert fast.total == slow.total, f"totals differ on\n{cost}"
    assert fast.pairs == slow.pairs, f"pairs differ on\n{cost}"


class TestSolverBasics:
    def test_identity_diagonal(self):
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])  # [N=2 preds, M=2 gts]
        a = hungarian_assign(cost)
        assert a.pairs == [(0, 0), (1, 1)]
        assert a.total == 0.0

    def test_rectangular_skips_expensive_pred(self):
        # 3 preds, 1 gt: pred 1 is cheapest
        cost = np.array([[5.0], [1.0], [3.0]])
        a = hungarian_assign(cost)
        assert a.pairs == [(0, 1)]
        assert a.total == 1.0

    def test_empty_gt(self):
        a = hungarian_assign(np.zeros((4, 0)))
        assert a.pairs == [] and a.total == 0.0

    def test_more_gts_than_preds_rejected(self):
        with pytest.raises(MatchingError):
            hungarian_assign(np.zeros((2, 3)))

    def test_nonfinite_rejected(self):
        cost = np.array([[1.0, np.inf], [0.0, 1.0]])
        with pytest.raises(MatchingError):
            hungarian_assign(cost)

    def test_all_equal_costs_lexicographic(self):
        # fully tied: lexicographically smallest pred vector is (0, 1, 2)
        a = hungarian_assign(np.zeros((5, 3)))
        assert [p for _, p in a.pairs] == [0, 1, 2]

    def test_tie_between_two_optima(self):
        # swapping both pairs keeps the total at 2; (0,1) beats (1,0) lex
        cost = np.array([[1.0, 1.0], [1.0, 1.0], [9.0, 9.0]])
        a = hungarian_assign(cost)
        assert [p for _, p in a.pairs] == [0, 1]


class TestOracleEquality:
    def test_random_continuous(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(0, n + 1))
            assert_same_assignment(rng.normal(size=(n, m)) * 10)

    def test_random_integer_heavy_ties(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(1, n + 1))
            assert_same_assignment(rng.integers(0, 3, size=(n, m)).astype(float))

    def test_negative_costs(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 8))
            m = int(rng.integers(1, n + 1))
            assert_same_assignment(rng.normal(size=(n, m)) - 5.0)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 7).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(1, n),
                        st.lists(st.integers(0, 4), min_size=n * n, max_size=n * n))))
def test_oracle_equality_property(case):
    n, m, flat = case
    cost = np.array(flat, dtype=float).reshape(n, n)[:, :m]
    assert_same_assignment(cost)


class TestCostMatrix:
    def test_shape_and_orientation(self, rng):
        logits = rng.normal(size=(6, 4))  # 3 classes + no-object
        boxes = rng.uniform(0.2, 0.8, size=(6, 4))
        gt_classes = np.array([0, 2])
        gt_boxes = rng.uniform(0.2, 0.8, size=(2, 4))
        cost = matching_cost(logits, boxes, gt_classes, gt_boxes, CostWeights())
        assert cost.shape == (6, 2)

    def test_perfect_prediction_is_cheapest(self):
        # slot 1 sits exactly on the gt with probability ~1 on its class
        logits = np.array([[0.0, 0.0, 0.0, 0.0],
                           [20.0, 0.0, 0.0, 0.0],
                           [0.0, 0.0, 0.0, 0.0]])
        boxes = np.array([[0.7, 0.7, 0.2, 0.2],
                          [0.4, 0.4, 0.2, 0.2],
                          [0.1, 0.1, 0.05, 0.05]])
        gt_boxes = np.array([[0.4, 0.4, 0.2, 0.2]])
        cost = matching_cost(logits, boxes, np.array([0]), gt_boxes, CostWeights())
        assert np.argmin(cost[:, 0]) == 1
        # exact box, near-certain class: cost ~ -1 + 5*0 + 2*(1-1) = -1
        assert cost[1, 0] == pytest.approx(-1.0, abs=1e-6)

    def test_component_weights_respected(self, rng):
        logits = rng.normal(size=(3, 3))
        boxes = rng.uniform(0.3, 0.7, size=(3, 4))
        gt_boxes = rng.uniform(0.3, 0.7, size=(1, 4))
        zero = matching_cost(logits, boxes, np.array([1]), gt_boxes,
                             CostWeights(class_weight=0, l1_weight=0, giou_weight=0))
        np.testing.assert_allclose(zero, 0.0, atol=1e-12)

    def test_gt_class_out_of_range(self, rng):
        logits = rng.normal(size=(3, 3))  # 2 classes + no-object
        boxes = np.full((3, 4), 0.5)
        with pytest.raises(MatchingError):
            matching_cost(logits, boxes, np.array([2]), np.full((1, 4), 0.5), CostWeights())

    def test_too_many_gts(self, rng):
        logits = rng.normal(size=(2, 3))
        with pytest.raises(MatchingError):
            matching_cost(logits, np.full((2, 4), 0.5), np.array([0, 0, 1]),
                          np.full((3, 4), 0.5), CostWeights())


class TestCanonicalTotal:
    def test_total_is_sum_in_gt_order(self, rng):
        cost = rng.normal(size=(5, 3))
        a = hungarian_assign(cost)
        want = sum(cost[p, g] for g, p in a.pairs)
        assert a.total == pytest.approx(want, rel=1e-12)
