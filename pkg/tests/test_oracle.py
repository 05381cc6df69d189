import itertools

import numpy as np
import pytest

from uflmatch.oracle import (
    brute_force_labeling,
    exhaustive_omp_bound,
    labeling_energy,
    naive_min_convolution,
)


def test_single_node_is_argmin():
    costs = [[0.4, 0.1, 0.3]]
    labeling, energy = brute_force_labeling([], costs, 1.0, 1.0, [(0, 0), (1, 0), (2, 0)])
    assert labeling == [1] and energy == 0.1


def test_no_smoothness_gives_independent_argmins(rng):
    costs = rng.random((2, 4))
    trans = [(i, 0) for i in range(4)]
    labeling, energy = brute_force_labeling([(0, 1)], costs, 0.0, 1.0, trans)
    assert labeling == list(np.argmin(costs, axis=1))
    assert energy == pytest.approx(costs.min(axis=1).sum())


def test_reversed_enumeration_agrees(rng):
    edges = [(0, 1), (1, 2), (0, 2)]
    trans = [(0, 0), (1, 0), (0, 1), (1, 1)]
    for _ in range(10):
        costs = rng.random((3, 4))
        _, energy = brute_force_labeling(edges, costs, 0.3, 1.5, trans)
        rev = min(
            labeling_energy(costs, edges, lab, trans, 0.3, 1.5)
            for lab in reversed(list(itertools.product(range(4), repeat=3)))
        )
        assert energy == rev


def test_labeling_guard():
    with pytest.raises(ValueError):
        brute_force_labeling([], np.zeros((7, 10)), 1.0, 1.0, [(i, 0) for i in range(10)])


def test_min_convolution_examples():
    h = np.array([0.0, 5.0, 5.0, 5.0])
    np.testing.assert_array_equal(naive_min_convolution(h, 1.0, np.inf), [0.0, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(naive_min_convolution(h, 1.0, 2.0), [0.0, 1.0, 2.0, 2.0])
    np.testing.assert_array_equal(naive_min_convolution(h, 0.0, 2.0), np.zeros(4))


def test_omp_bound_orthonormal():
    d = np.eye(6)
    x = np.array([3.0, 0, 0, 2.0, 0.5, 0])
    assert exhaustive_omp_bound(d, x, 2) == pytest.approx(0.5)


def test_omp_bound_guard():
    with pytest.raises(ValueError):
        exhaustive_omp_bound(np.eye(40), np.ones(40), 10)
