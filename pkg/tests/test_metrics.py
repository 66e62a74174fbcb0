import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcwm.errors import InputError
from gcwm.metrics import adjusted_rand_index, best_permutation, confusion_report


def _labels_from_matrix(M):
    true, pred = [], []
    for i, row in enumerate(M):
        for j, c in enumerate(row):
            true += [i] * c
            pred += [j] * c
    return np.array(true), np.array(pred)


def _pair_count_ari(a, b):
    """Adjusted Rand index by explicit enumeration of element pairs."""
    n = len(a)
    pairs = list(itertools.combinations(range(n), 2))
    same_a = np.array([a[i] == a[j] for i, j in pairs])
    same_b = np.array([b[i] == b[j] for i, j in pairs])
    index = np.sum(same_a & same_b)
    expected = same_a.sum() * same_b.sum() / len(pairs)
    maximum = 0.5 * (same_a.sum() + same_b.sum())
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def _set_partitions(n, k):
    """All labelings of n elements into at most k classes, up to relabeling."""
    def rec(prefix, used):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for c in range(min(used + 1, k)):
            yield from rec(prefix + [c], max(used, c + 1))
    yield from rec([], 0)


MATRIX = [[992, 3, 5], [0, 990, 10], [15, 20, 965]]


class TestConfusion:
    def test_reference_matrix(self):
        t, p = _labels_from_matrix(MATRIX)
        rep = confusion_report(t, p)
        assert round(100 * rep.purity, 2) == 98.23
        assert round(100 * rep.misclassification, 2) == 1.77
        assert rep.n == 3000

    def test_alignment_recovers_permuted_labels(self):
        t, p = _labels_from_matrix(MATRIX)
        rep = confusion_report(t, np.array([2, 0, 1])[p])
        np.testing.assert_array_equal(rep.matrix, MATRIX)

    def test_identical_partitions(self):
        lab = np.array([0, 0, 1, 2, 2, 1])
        rep = confusion_report(lab, lab)
        assert rep.misclassification == 0 and rep.purity == 1 and rep.ari == 1

    def test_extra_predicted_class_padded(self):
        rep = confusion_report([0, 0, 1, 1], [0, 2, 1, 1])
        assert rep.matrix.shape == (2, 3)
        assert rep.misclassification == pytest.approx(0.25)

    def test_mismatched_lengths(self):
        with pytest.raises(InputError):
            confusion_report([0, 1], [0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
    def test_alignment_is_optimal(self, pairs):
        t, p = map(np.array, zip(*pairs))
        rep = confusion_report(t, p)
        assert rep.matrix.sum() == len(pairs)
        best = np.trace(rep.matrix[:, : rep.matrix.shape[0]])
        for perm in itertools.permutations(range(3)):
            assert np.sum(np.array(perm)[p] == t) <= best
        assert rep.misclassification == pytest.approx(1 - best / len(pairs))


class TestAri:
    def test_six_element_example(self):
        a = [0, 0, 0, 1, 1, 1]
        b = [0, 0, 1, 1, 1, 1]
        assert adjusted_rand_index(a, b) == pytest.approx(_pair_count_ari(a, b), abs=1e-14)

    @pytest.mark.parametrize("n", range(2, 7))
    def test_brute_force_all_partitions(self, n):
        parts = list(_set_partitions(n, 3))
        for a in parts:
            for b in parts:
                assert adjusted_rand_index(a, b) == pytest.approx(_pair_count_ari(a, b),
                                                                  abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.integers(0, 3), min_size=2, max_size=30), st.permutations(range(4)))
    def test_invariant_to_relabeling(self, a, perm):
        a = np.array(a)
        b = np.roll(a, 1)
        assert adjusted_rand_index(a, b) == pytest.approx(
            adjusted_rand_index(np.array(perm)[a], b), abs=1e-12)
        assert adjusted_rand_index(a, a) == 1.0


def test_best_permutation_hungarian_branch():
    rng = np.random.default_rng(0)
    C = rng.integers(0, 100, size=(10, 10))
    perm = best_permutation(C)
    assert sorted(perm) == list(range(10))
    from scipy.optimize import linear_sum_assignment
    r, c = linear_sum_assignment(-C)
    assert C[np.arange(10), perm].sum() == C[r, c].sum()
