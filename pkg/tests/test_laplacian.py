import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import central_diff, laplacian_pairwise
from vslcrf.laplacian import build_laplacian, posterior_reg, posterior_reg_gradient


class TestGraph:
    def test_two_plus_one(self):
        g = build_laplacian([1, 1, 2])
        np.testing.assert_array_equal(g.laplacian, [[1, -1, 0], [-1, 1, 0], [0, 0, 0]])
        np.testing.assert_array_equal(g.similarity, [[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        assert g.N == 3

    def test_distinct_labels(self):
        np.testing.assert_array_equal(build_laplacian([1, 2, 3, 4]).laplacian, np.zeros((4, 4)))

    def test_complete_graph(self):
        np.testing.assert_array_equal(build_laplacian([2, 2, 2]).laplacian,
                                      [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])

    def test_rows_sum_to_zero(self, rng):
        L = build_laplacian(rng.integers(1, 4, size=12)).laplacian
        np.testing.assert_array_equal(L.sum(axis=1), 0.0)
        np.testing.assert_array_equal(L, L.T)

    def test_empty_labels(self):
        with pytest.raises(ValueError):
            build_laplacian([])


class TestPenalty:
    def test_constant_is_exactly_zero(self, rng):
        labels = rng.integers(1, 3, size=9)
        g = build_laplacian(labels)
        for c in (0.0, 0.37, 1.0, 1 / 3):
            assert posterior_reg(np.full(9, c), g) == 0.0
            np.testing.assert_array_equal(posterior_reg_gradient(np.full(9, c), g), 0.0)

    def test_hand_value(self):
        assert posterior_reg([1.0, 0.0, 0.0], build_laplacian([1, 1, 2])) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6))
    def test_pairwise_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        labels = rng.integers(1, 3, size=n)
        f = rng.random(n)
        g = build_laplacian(labels)
        assert abs(posterior_reg(f, g) - laplacian_pairwise(f, labels)) < 1e-12
        assert abs(float(f @ g.laplacian @ f) - laplacian_pairwise(f, labels)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 20))
    def test_non_negative(self, seed, n):
        rng = np.random.default_rng(seed)
        assert posterior_reg(rng.random(n), build_laplacian(rng.integers(1, 4, size=n))) >= 0.0

    def test_gradient(self, rng):
        labels = rng.integers(1, 3, size=7)
        g = build_laplacian(labels)
        f = rng.random(7)
        np.testing.assert_allclose(posterior_reg_gradient(f, g),
                                   central_diff(lambda v: posterior_reg(v, g), f), atol=1e-8)
