import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fclm.adversarial import finite_diff_check
from fclm.depth_distill import (
    DepthMap,
    DepthWeightPair,
    MetaNet,
    compute_depth_weights,
    feature_distance,
    kd_loss_depth_aware,
    kd_loss_plain,
    meta_project,
    token_kl,
)
from fclm.grid import FeatureGrid
from fclm.nn import Layer, TinyNet
from fclm.numerics import kl_divergence, row_softmax


def grid(tokens, h=None, w=None):
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    return FeatureGrid(h or 1, w or tokens.shape[0], tokens)


class TestDepthWeights:
    def test_hand_example(self):
        w = compute_depth_weights(DepthMap(np.array([[0.8, 0.2], [0.25, 1.0]])), 0.25, (2, 2))
        np.testing.assert_array_equal(w.d_plus, [[0.8, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(w.d_minus, [[0.0, 0.2], [0.0, 0.0]], atol=1e-15)

    def test_all_foreground_and_all_background(self):
        w = compute_depth_weights(DepthMap(np.ones((4, 4))), 0.25, (2, 2))
        np.testing.assert_array_equal(w.d_plus, 1.0)
        np.testing.assert_array_equal(w.d_minus, 0.0)
        w = compute_depth_weights(DepthMap(np.zeros((4, 4))), 0.25, (2, 2))
        np.testing.assert_array_equal(w.d_plus, 0.0)
        np.testing.assert_array_equal(w.d_minus, 1.0)

    def test_strict_mode(self):
        with pytest.raises(ValueError, match="empty foreground partition"):
            compute_depth_weights(DepthMap(np.zeros((2, 2))), 0.25, strict=True)

    def test_patch_pooling_keeps_fractions(self):
        depth = np.array([[1.0, 0.0], [0.0, 0.0]])
        w = compute_depth_weights(DepthMap(depth), 0.25, (1, 1))
        assert w.d_plus[0, 0] == pytest.approx(0.25)
        assert w.d_minus[0, 0] == pytest.approx(0.75)

    def test_validation(self):
        with pytest.raises(ValueError):
            DepthMap(np.array([[1.5]]))
        with pytest.raises(ValueError):
            compute_depth_weights(DepthMap(np.zeros((3, 3))), 0.25, (2, 2))
        np.testing.assert_allclose(DepthMap.normalized([[2.0, 4.0]]).values, [[0.5, 1.0]])

    @given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.floats(0.05, 0.95))
    def test_partition(self, depth, delta):
        w = compute_depth_weights(DepthMap(depth), delta)
        assert np.all(w.d_plus * w.d_minus == 0)
        assert np.array_equal(w.d_plus > 0, depth > delta)

    @given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
    def test_monotone_foreground(self, depth):
        w = compute_depth_weights(DepthMap(depth), 0.25)
        fg = depth > 0.25
        order = np.argsort(depth[fg])
        assert np.all(np.diff(w.d_plus[fg][order]) >= 0)


class TestMetaNet:
    def test_identity_on_nonnegative_tokens(self, rng):
        t = grid(np.abs(rng.normal(size=(6, 4))), 2, 3)
        np.testing.assert_array_equal(meta_project(t, MetaNet.identity(4)).tokens, t.tokens)

    def test_context_cancellation(self, rng):
        tok = rng.normal(size=(1, 3))
        net = MetaNet.init(3, 5, 2, rng)
        net = MetaNet(-tok.ravel(), net.body)
        out = meta_project(grid(tok), net)
        np.testing.assert_allclose(out.tokens, net.body.layers[1].bias[None, :])

    def test_output_shape_and_errors(self, rng):
        net = MetaNet.init(4, 8, 6, rng)
        assert meta_project(grid(rng.normal(size=(6, 4)), 2, 3), net).tokens.shape == (6, 6)
        with pytest.raises(ValueError):
            meta_project(grid(rng.normal(size=(6, 5)), 2, 3), net)


class TestPlainKD:
    def test_identical_is_zero(self, rng):
        a, b = grid(rng.normal(size=(4, 3))), grid(rng.normal(size=(4, 3)))
        assert kd_loss_plain(a, b, a, b) == pytest.approx(0.0, abs=1e-9)

    def test_additivity(self, rng):
        a, b, tb = (grid(rng.normal(size=(4, 3))) for _ in range(3))
        assert kd_loss_plain(a, b, a, tb) == pytest.approx(feature_distance(b, tb), abs=1e-15)

    def test_hand_value(self):
        s = grid([[math.log(3), 0.0]])
        t = grid([[0.0, 0.0]])
        assert feature_distance(s, t) == pytest.approx(kl_divergence([0.75, 0.25], [0.5, 0.5]), abs=1e-12)
        assert feature_distance(s, t) == pytest.approx(0.1308, abs=1e-3)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            kd_loss_plain(grid(np.ones((2, 3))), grid(np.ones((2, 3))), grid(np.ones((3, 3))), grid(np.ones((2, 3))))

    def test_temperature_softens(self):
        s, t = np.array([[4.0, 0.0]]), np.array([[0.0, 4.0]])
        assert token_kl(s, t, 4.0)[0] < token_kl(s, t, 1.0)[0]


class TestDepthAwareKD:
    @pytest.fixture
    def setup(self, rng):
        student = grid(rng.normal(size=(4, 5)), 2, 2)
        teacher = grid(rng.normal(size=(4, 3)), 2, 2)
        return student, teacher, MetaNet.init(3, 6, 5, rng), MetaNet.init(3, 6, 5, rng)

    def test_zero_weights(self, setup):
        s, t, fg, bg = setup
        w = DepthWeightPair(np.zeros((2, 2)), np.zeros((2, 2)), 0.25)
        assert kd_loss_depth_aware(s, t, w, fg, bg) == 0.0

    def test_exact_projection_is_zero(self, rng):
        t = grid(np.abs(rng.normal(size=(4, 3))), 2, 2)
        w = DepthWeightPair(np.ones((2, 2)), np.zeros((2, 2)), 0.25)
        net = MetaNet.identity(3)
        assert kd_loss_depth_aware(t, t, w, net, MetaNet.init(3, 4, 3, rng)) == pytest.approx(0.0, abs=1e-9)

    def test_two_token_decomposition(self, rng):
        s = grid(rng.normal(size=(2, 4)), 1, 2)
        t = grid(rng.normal(size=(2, 3)), 1, 2)
        fg, bg = MetaNet.init(3, 5, 4, rng), MetaNet.init(3, 5, 4, rng)
        w = DepthWeightPair(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 0.25)
        p = row_softmax(s.tokens)
        q_fg = row_softmax(meta_project(t, fg).tokens)
        q_bg = row_softmax(meta_project(t, bg).tokens)
        expected = kl_divergence(p[0], q_fg[0]) + kl_divergence(p[1], q_bg[1])
        assert kd_loss_depth_aware(s, t, w, fg, bg) == pytest.approx(expected, abs=1e-12)

    def test_reduces_to_plain(self, setup):
        s, t, fg, bg = setup
        w = DepthWeightPair(np.ones((2, 2)), np.zeros((2, 2)), 0.25)
        plain = feature_distance(s, meta_project(t, fg))
        assert kd_loss_depth_aware(s, t, w, fg, bg) == pytest.approx(plain, abs=1e-12)

    def test_joint_permutation_invariance(self, setup, rng):
        s, t, fg, bg = setup
        w = compute_depth_weights(DepthMap(rng.uniform(size=(2, 2))), 0.25)
        perm = np.array([2, 0, 3, 1])
        ps, pt = s.with_tokens(s.tokens[perm]), t.with_tokens(t.tokens[perm])
        pw = DepthWeightPair(w.d_plus.ravel()[perm].reshape(2, 2), w.d_minus.ravel()[perm].reshape(2, 2), 0.25)
        assert kd_loss_depth_aware(ps, pt, pw, fg, bg) == pytest.approx(kd_loss_depth_aware(s, t, w, fg, bg), abs=1e-14)

    def test_grid_mismatch(self, setup):
        s, t, fg, bg = setup
        w = DepthWeightPair(np.ones((1, 4)), np.zeros((1, 4)), 0.25)
        with pytest.raises(ValueError):
            kd_loss_depth_aware(s, t, w, fg, bg)

    def test_meta_net_gradients(self, setup, rng):
        from fclm.checks import GRADIENT_CASES

        fn, theta = GRADIENT_CASES["kd_depth_aware"](rng)
        assert finite_diff_check(fn, theta) < 1e-4
