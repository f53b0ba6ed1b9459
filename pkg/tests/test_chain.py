import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import brute_branch, brute_class_posterior, brute_nu_posterior, random_model, random_seqs
from vslcrf.chain import (
    branch_partition,
    class_conditional,
    forward_backward,
    infer,
    nu_posterior,
    nu_posterior_from_log_z,
    predict_frames,
    predict_labels,
    predict_proba,
    predict_sequence,
    window_bounds,
)
from vslcrf.core import (
    BOTH_BRANCHES,
    Branch,
    EdgeFeature,
    Hyperparams,
    InvalidInputError,
    Mode,
    Model,
    ModelConfig,
    Sequence,
    UnsupportedModeError,
    zero_model,
)
from vslcrf.learning import fit


def _shared_model(rng, K, C, D, mode):
    """K classes that all carry one random parameter block."""
    one = random_model(rng, 1, C, D, mode)
    return Model(ModelConfig(K, C, D, mode=mode), one.classes * K, one.hyper)


class TestForwardBackward:
    def test_single_frame_zero_params(self):
        m = zero_model(ModelConfig(1, 2, 1))
        post = branch_partition(Sequence("s", [[0.4]], 1), m.classes[0], Branch.NOMINAL, m)
        assert post.log_z == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(post.node_marginals, [[0.5, 0.5]])

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(2, 4))
        edge = EdgeFeature.CONSTANT_ONE if seed % 2 else EdgeFeature.L1_DISTANCE
        m = random_model(rng, 1, C, 2, Mode.VSLD, edge=edge)
        seq = Sequence("s", rng.standard_normal((int(rng.integers(1, 7)), 2)), 1)
        for br in Branch:
            post = branch_partition(seq, m.classes[0], br, m)
            lz, mu, xi = brute_branch(seq, m.classes[0], br, m)
            assert abs(post.log_z - lz) < 1e-9
            np.testing.assert_allclose(post.node_marginals, mu, atol=1e-9)
            np.testing.assert_allclose(post.edge_marginals, xi, atol=1e-9)

    def test_marginals_consistent(self, rng):
        node = rng.standard_normal((3, 5, 3))
        edge = rng.standard_normal((3, 4, 3, 3))
        _, mu, xi = forward_backward(node, edge)
        np.testing.assert_allclose(mu.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(xi.sum(-1), mu[:, :-1], atol=1e-12)
        np.testing.assert_allclose(xi.sum(-2), mu[:, 1:], atol=1e-12)

    def test_extreme_scores_stable(self):
        node = np.array([[[-800.0, -1000.0], [-900.0, -700.0]]])
        edge = np.array([[[[500.0, -500.0], [0.0, 0.0]]]])
        lz, mu, _ = forward_backward(node, edge)
        assert np.isfinite(lz[0])
        assert np.all(np.isfinite(mu))

    def test_batched_equals_single(self, rng):
        m = random_model(rng, 2, 3, 2, Mode.VSLD)
        data = random_seqs(rng, 7, 2, 2, 5)
        batch = infer(data, m).log_z
        for i, s in enumerate(data):
            np.testing.assert_allclose(batch[i], infer([s], m).log_z[0], atol=1e-13)

    def test_inactive_branch_is_neg_inf(self, rng):
        m = random_model(rng, 2, 2, 1, Mode.HCRF).with_mode(Mode.HCRF)
        lz = infer(random_seqs(rng, 2, 1, 2, 3), m).log_z
        assert np.all(np.isneginf(lz[..., 1]))
        assert np.all(np.isfinite(lz[..., 0]))


class TestClassConditional:
    @pytest.mark.parametrize("mode", list(Mode))
    def test_matches_enumeration(self, mode):
        rng = np.random.default_rng(7)
        for _ in range(4):
            m = random_model(rng, 2, 2, 2, mode)
            seq = Sequence("s", rng.standard_normal((int(rng.integers(1, 5)), 2)), 1)
            np.testing.assert_allclose(class_conditional(seq, m), brute_class_posterior(seq, m), atol=1e-9)

    def test_single_class(self, rng):
        m = random_model(rng, 1, 3, 2, Mode.VSLEM)
        np.testing.assert_array_equal(class_conditional(Sequence("s", rng.standard_normal((4, 2)), 1), m), [1.0])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 4), mode=st.sampled_from(list(Mode)))
    def test_identical_classes_uniform(self, seed, K, mode):
        rng = np.random.default_rng(seed)
        m = _shared_model(rng, K, 3, 2, mode)
        p = class_conditional(Sequence("s", rng.standard_normal((5, 2)), 1), m)
        np.testing.assert_allclose(p, 1.0 / K, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        m = random_model(rng, 2, 2, 2, Mode.HCRF)
        with pytest.raises(InvalidInputError):
            class_conditional(Sequence("s", np.zeros((3, 3)), 1), m)

    def test_predict_proba_rows(self, rng):
        m = random_model(rng, 3, 2, 2, Mode.VSLD)
        P = predict_proba(random_seqs(rng, 5, 2, 3, 4), m)
        np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-12)


class TestNuPosterior:
    def test_matches_enumeration(self, rng):
        for mode in (Mode.VSLM, Mode.VSLD, Mode.VSLEM):
            m = random_model(rng, 2, 3, 2, mode)
            seq = Sequence("s", rng.standard_normal((4, 2)), 2)
            for y in (1, 2):
                nu = nu_posterior(seq, y, m)
                np.testing.assert_allclose([nu.p_nominal, nu.p_ordinal], brute_nu_posterior(seq, y, m), atol=1e-9)
                assert nu.p_nominal + nu.p_ordinal == pytest.approx(1.0, abs=1e-15)
                assert nu[Branch.ORDINAL] == nu.p_ordinal

    def test_equal_branches(self):
        np.testing.assert_array_equal(nu_posterior_from_log_z(np.array([-3.2, -3.2])), [0.5, 0.5])

    def test_unsupported_mode(self, rng):
        m = random_model(rng, 2, 2, 1, Mode.HCRF)
        with pytest.raises(UnsupportedModeError):
            nu_posterior(Sequence("s", [[0.0]], 1), 1, m)

    def test_label_range(self, rng):
        m = random_model(rng, 2, 2, 1, Mode.VSLD)
        with pytest.raises(InvalidInputError):
            nu_posterior(Sequence("s", [[0.0]], 1), 3, m)


class TestPrediction:
    def test_tie_goes_to_first_label(self, rng):
        m = _shared_model(rng, 3, 2, 2, Mode.VSLD)
        assert predict_sequence(Sequence("s", rng.standard_normal((4, 2)), 1), m) == 1

    def test_preferred_class_wins(self, rng):
        a = random_model(rng, 1, 2, 1, Mode.HCRF, scale=0.0)
        b_edge = np.array([[0.0, 0.0], [0.0, 3.0]])
        from dataclasses import replace
        cp2 = replace(a.classes[0], nominal=replace(a.classes[0].nominal, beta=np.array([[0.0, -4.0], [0.0, 4.0]])),
                      nominal_edge=replace(a.classes[0].nominal_edge, u=b_edge))
        m = Model(ModelConfig(2, 2, 1, EdgeFeature.CONSTANT_ONE, Mode.HCRF), (a.classes[0], cp2), a.hyper)
        seq = Sequence("s", np.full((4, 1), 2.0), 1)
        assert class_conditional(seq, m)[1] > 0.5
        assert predict_sequence(seq, m) == 2

    def test_labels_match_argmax(self, rng):
        m = random_model(rng, 3, 2, 2, Mode.VSLEM)
        data = random_seqs(rng, 6, 2, 3, 5)
        np.testing.assert_array_equal(predict_labels(data, m), [predict_sequence(s, m) for s in data])


class TestWindows:
    def test_bounds(self):
        assert window_bounds(10, 0, 5) == (0, 3)
        assert window_bounds(10, 5, 5) == (3, 8)
        assert window_bounds(10, 9, 5) == (7, 10)
        assert window_bounds(10, 5, 4) == (4, 8)
        assert window_bounds(4, 2, 9) == (0, 4)

    def test_window_covering_sequence(self, rng):
        m = random_model(rng, 3, 2, 2, Mode.VSLD)
        seq = Sequence("s", rng.standard_normal((6, 2)), 1)
        for w in (6, 10):
            np.testing.assert_array_equal(predict_frames(seq, m, w), predict_sequence(seq, m))

    def test_window_one_uses_single_frames(self, rng):
        # one frame has no edges, and normalized node terms make every class equally likely
        m = random_model(rng, 3, 2, 2, Mode.VSLD)
        labels = predict_frames(Sequence("s", rng.standard_normal((5, 2)), 1), m, 1)
        np.testing.assert_array_equal(labels, 1)

    def test_bad_window(self, rng):
        m = random_model(rng, 2, 2, 2, Mode.HCRF)
        with pytest.raises(InvalidInputError):
            predict_frames(Sequence("s", np.zeros((3, 2)), 1), m, 0)

    def test_regime_change_localized(self):
        # class 1 = still frames, class 2 = jittery frames; the switch sits at t=20
        offsets = []
        for seed in range(4):
            rng = np.random.default_rng(seed)
            train = ([Sequence(f"a{i}", rng.normal(0, 0.1, (12, 2)), 1) for i in range(15)]
                     + [Sequence(f"b{i}", rng.normal(0, 1.0, (12, 2)), 2) for i in range(15)])
            m = fit(train, ModelConfig(2, 3, 2, mode=Mode.HCRF), Hyperparams(seed=seed)).model
            x = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(0, 1.0, (20, 2))])
            lab = predict_frames(Sequence("t", x, 1), m, 5)
            offsets.append(abs(int(np.argmax(lab == 2)) - 20) if np.any(lab == 2) else 20)
        assert np.mean(offsets) <= 3
