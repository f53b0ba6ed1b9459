import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import central_diff, node_logp, random_model
from vslcrf.core import Branch, EdgeFeature, EdgeParams, InvalidInputError, Mode, NominalParams, OrdinalParams, Sequence
from vslcrf.potentials import (
    PROB_FLOOR,
    edge_logpotential,
    edge_table,
    node_table,
    nominal_node_grad,
    nominal_node_logprob,
    ordinal_node_grad,
    ordinal_node_logprob,
    sequence_score,
)


class TestNominal:
    def test_zero_weights_uniform(self):
        lp = nominal_node_logprob(np.array([0.3, -2.0]), NominalParams(np.zeros((3, 3))))
        np.testing.assert_allclose(lp, np.log(1 / 3), atol=1e-15)
        np.testing.assert_allclose(lp, -1.098612, atol=1e-6)

    def test_two_state_softmax(self):
        beta = np.array([[0.0, 0.5], [0.0, 0.0]])
        p = np.exp(nominal_node_logprob(np.array([2.0]), NominalParams(beta)))
        np.testing.assert_allclose(p, [0.731059, 0.268941], atol=1e-6)

    def test_equal_rows(self):
        beta = np.array([[0.7, -1.2, 3.0]] * 2)
        p = np.exp(nominal_node_logprob(np.array([5.0, 1.0]), NominalParams(beta)))
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)

    def test_large_scores_stay_finite(self):
        beta = np.array([[0.0, 1e4], [0.0, -1e4]])
        lp = nominal_node_logprob(np.array([3.0]), NominalParams(beta))
        assert np.all(np.isfinite(lp))
        assert lp[0] == pytest.approx(0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            nominal_node_logprob(np.zeros(3), NominalParams(np.zeros((2, 3))))


class TestOrdinal:
    def test_two_state_symmetric(self):
        p = OrdinalParams(np.zeros(2), 0.0, np.zeros(0), 1.0)
        np.testing.assert_allclose(ordinal_node_logprob(np.array([1.0, -4.0]), p, 2), np.log([0.5, 0.5]),
                                   atol=1e-15)

    def test_unit_thresholds(self):
        # cut points (-1, 1), sigma exactly 1
        p = OrdinalParams(np.zeros(1), -1.0, np.array([np.sqrt(2.0)]), 1.0)
        probs = np.exp(ordinal_node_logprob(np.array([0.0]), p, 3, sigma_floor=0.0))
        np.testing.assert_allclose(probs, [0.158655, 0.682689, 0.158655], atol=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), C=st.integers(2, 5), scale=st.floats(0.1, 5.0))
    def test_probabilities_sum_to_one(self, seed, C, scale):
        rng = np.random.default_rng(seed)
        p = OrdinalParams(scale * rng.standard_normal(3), float(rng.standard_normal()),
                          rng.standard_normal(C - 2), float(rng.uniform(0.3, 2.0)))
        lp = ordinal_node_logprob(rng.standard_normal(3), p, C)
        assert abs(np.exp(lp).sum() - 1.0) < 1e-12

    def test_matches_scipy_reference(self, rng):
        for _ in range(50):
            m = random_model(rng, 1, 4, 3, Mode.HCORF)
            x = 2 * rng.standard_normal(3)
            np.testing.assert_allclose(ordinal_node_logprob(x, m.classes[0].ordinal, 4),
                                       node_logp(x, m.classes[0], Branch.ORDINAL, 4, 1e-4), rtol=1e-10, atol=1e-12)

    def test_far_tail_clamped_not_nan(self):
        p = OrdinalParams(np.array([1.0]), 0.0, np.array([1.0]), 0.1)
        lp = ordinal_node_logprob(np.array([1e6]), p, 3)
        assert np.all(np.isfinite(lp))
        assert lp.min() == pytest.approx(np.log(PROB_FLOOR))
        assert lp[2] == pytest.approx(0.0)

    def test_upper_tail_keeps_precision(self):
        # both cut points well above the mean: differences of cdf values near 1 would cancel
        p = OrdinalParams(np.array([1.0]), 0.0, np.array([1.0]), 1.0)
        lp = ordinal_node_logprob(np.array([-12.0]), p, 3, sigma_floor=0.0)
        from scipy.stats import norm
        expected_mid = np.log(norm.sf(12.0) - norm.sf(13.0))
        assert lp[1] == pytest.approx(expected_mid, rel=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            ordinal_node_logprob(np.zeros(2), OrdinalParams(np.zeros(3), 0.0, np.zeros(1), 1.0), 3)


class TestEdges:
    def test_zero_u(self):
        v = edge_logpotential(np.array([1.0, 2.0]), np.array([0.0, 5.0]), EdgeParams(np.zeros((3, 3))))
        np.testing.assert_array_equal(v, 0.0)

    def test_l1_equal_frames(self):
        x = np.array([1.5, -2.0])
        v = edge_logpotential(x, x, EdgeParams(np.arange(4.0).reshape(2, 2)), EdgeFeature.L1_DISTANCE)
        np.testing.assert_array_equal(v, 0.0)

    def test_constant_one_lookup(self):
        u = np.array([[1.0, 2.0], [3.0, 4.0]])
        v = edge_logpotential(np.zeros(1), np.ones(1), EdgeParams(u), EdgeFeature.CONSTANT_ONE)
        assert v[1, 0] == 3.0

    def test_l1_scaling(self):
        u = np.array([[1.0, 2.0], [3.0, 4.0]])
        v = edge_logpotential(np.array([0.0, 1.0]), np.array([2.0, -1.0]), EdgeParams(u))
        np.testing.assert_array_equal(v, 4.0 * u)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            edge_logpotential(np.zeros(2), np.zeros(3), EdgeParams(np.zeros((2, 2))))


class TestSequenceScore:
    def test_single_frame_is_node(self, rng):
        m = random_model(rng, 1, 3, 2, Mode.VSLD)
        seq = Sequence("s", rng.standard_normal((1, 2)), 1)
        for br in Branch:
            lp = node_table(seq, m.classes[0], br, 3).values[0]
            assert sequence_score(seq, m.classes[0], br, [2], 3) == pytest.approx(lp[1], abs=1e-14)

    def test_zero_params_nominal(self, rng):
        from vslcrf.core import ModelConfig, zero_model
        m = zero_model(ModelConfig(1, 3, 2))
        seq = Sequence("s", rng.standard_normal((5, 2)), 1)
        s = sequence_score(seq, m.classes[0], Branch.NOMINAL, [1, 3, 2, 2, 1], 3)
        assert s == pytest.approx(5 * np.log(1 / 3), abs=1e-12)

    def test_hand_sum(self, rng):
        m = random_model(rng, 1, 2, 2, Mode.VSLD)
        cp = m.classes[0]
        X = rng.standard_normal((3, 2))
        seq = Sequence("s", X, 1)
        for br in Branch:
            nodes = [node_logp(X[t], cp, br, 2, 1e-4) for t in range(3)]
            u = cp.edge(br).u
            g = [np.abs(X[t] - X[t + 1]).sum() for t in range(2)]
            hand = nodes[0][0] + nodes[1][1] + nodes[2][1] + u[0, 1] * g[0] + u[1, 1] * g[1]
            assert sequence_score(seq, cp, br, [1, 2, 2], 2) == pytest.approx(hand, abs=1e-12)

    def test_edge_table_shape(self, rng):
        m = random_model(rng, 1, 3, 2, Mode.VSLD)
        seq = Sequence("s", rng.standard_normal((4, 2)), 1)
        assert edge_table(seq, m.classes[0], Branch.ORDINAL).values.shape == (3, 3, 3)

    def test_bad_path(self, rng):
        m = random_model(rng, 1, 2, 1, Mode.VSLD)
        seq = Sequence("s", rng.standard_normal((2, 1)), 1)
        with pytest.raises(InvalidInputError):
            sequence_score(seq, m.classes[0], Branch.NOMINAL, [1, 3], 2)
        with pytest.raises(InvalidInputError):
            sequence_score(seq, m.classes[0], Branch.NOMINAL, [1], 2)


class TestNodeGradients:
    """Weighted log-probability gradients against central differences."""

    def test_nominal(self, rng):
        C, D = 3, 2
        x = rng.standard_normal((5, D))
        w = rng.random((5, C))
        beta = rng.standard_normal((C, D + 1))

        def f(v):
            return float(np.sum(w * nominal_node_logprob(x, NominalParams(v.reshape(C, D + 1)))))

        g = nominal_node_grad(x, w, NominalParams(beta))
        np.testing.assert_allclose(g.ravel(), central_diff(f, beta.ravel()), rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("C", [2, 3, 4])
    def test_ordinal(self, rng, C):
        D = 2
        x = rng.standard_normal((6, D))
        w = rng.random((6, C))
        theta = np.concatenate([rng.standard_normal(D), [0.2], rng.standard_normal(C - 2), [0.9]])

        def params(v):
            return OrdinalParams(v[:D], float(v[D]), v[D + 1:D + C - 1], float(v[D + C - 1]))

        def f(v):
            return float(np.sum(w * ordinal_node_logprob(x, params(v), C)))

        ga, gb1, gg, gs = ordinal_node_grad(x, w, params(theta), C)
        analytic = np.concatenate([ga, [gb1], gg, [gs]])
        np.testing.assert_allclose(analytic, central_diff(f, theta), rtol=1e-6, atol=1e-7)
