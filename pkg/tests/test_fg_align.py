import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fclm.fg_align import (
    ForegroundTokenSet,
    NoForegroundError,
    PatchMask,
    SinkhornDivergence,
    cost_matrix_cosine,
    exchange_tokens,
    filter_foreground_pair,
    filter_foreground_tokens,
    ot_loss,
    ot_loss_with_grad,
    patchify_mask,
    sinkhorn_plan,
)
from fclm.grid import FeatureGrid
from fclm.oracles import lp_permutation_optimum


def tokens(arr):
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    return ForegroundTokenSet(arr, np.arange(arr.shape[0]))


class TestMasks:
    def test_patchify(self):
        np.testing.assert_array_equal(patchify_mask(np.zeros((32, 32)), (2, 2)).values, 0.0)
        np.testing.assert_array_equal(patchify_mask(np.ones((32, 32)), (2, 2)).values, 1.0)
        np.testing.assert_allclose(patchify_mask([[1, 0], [0, 0]], (1, 1)).values, [[0.25]])
        with pytest.raises(ValueError, match="multiple"):
            patchify_mask(np.ones((5, 4)), (2, 2))

    def test_filter(self, rng):
        f = FeatureGrid(2, 2, rng.normal(size=(4, 3)))
        kept = filter_foreground_tokens(f, PatchMask(np.array([[1.0, 0.0], [0.0, 0.5]])))
        assert kept.k == 2
        np.testing.assert_array_equal(kept.indices, [0, 3])
        assert filter_foreground_tokens(f, PatchMask(np.full((2, 2), 0.1))).k == 4
        with pytest.raises(NoForegroundError, match="no foreground"):
            filter_foreground_tokens(f, PatchMask(np.zeros((2, 2))))

    def test_filter_equivariance(self, rng):
        f = rng.normal(size=(6, 3))
        m = np.array([1.0, 0, 0.3, 0, 1, 1])
        perm = rng.permutation(6)
        a = filter_foreground_tokens(FeatureGrid(2, 3, f), PatchMask(m.reshape(2, 3)))
        b = filter_foreground_tokens(FeatureGrid(2, 3, f[perm]), PatchMask(m[perm].reshape(2, 3)))
        inverse = np.argsort(perm)
        assert sorted(perm[b.indices]) == sorted(a.indices)
        for tok, idx in zip(b.tokens, b.indices):
            np.testing.assert_array_equal(tok, f[perm[idx]])
        assert inverse.size == 6

    def test_pair_intersection_warns(self, rng):
        a, b = FeatureGrid(1, 3, rng.normal(size=(3, 2))), FeatureGrid(1, 3, rng.normal(size=(3, 2)))
        with pytest.warns(UserWarning, match="intersection"):
            fa, fb = filter_foreground_pair(a, b, PatchMask(np.array([[1.0, 1, 0]])), PatchMask(np.array([[0.0, 1, 1]])))
        np.testing.assert_array_equal(fa.indices, [1])
        np.testing.assert_array_equal(fb.indices, [1])


class TestExchange:
    def test_ratio_extremes(self, rng):
        a, b = FeatureGrid(2, 4, rng.normal(size=(8, 3))), FeatureGrid(2, 4, rng.normal(size=(8, 3)))
        a0, b0, idx = exchange_tokens(a, b, 0.0, 1)
        assert idx.size == 0
        np.testing.assert_array_equal(a0.tokens, a.tokens)
        a1, b1, _ = exchange_tokens(a, b, 1.0, 1)
        np.testing.assert_array_equal(a1.tokens, b.tokens)
        np.testing.assert_array_equal(b1.tokens, a.tokens)

    def test_default_ratio_count_and_determinism(self, rng):
        a, b = FeatureGrid(2, 4, rng.normal(size=(8, 3))), FeatureGrid(2, 4, rng.normal(size=(8, 3)))
        _, _, i1 = exchange_tokens(a, b, 0.25, 7)
        _, _, i2 = exchange_tokens(a, b, 0.25, 7)
        assert i1.size == 2
        np.testing.assert_array_equal(i1, i2)

    @given(st.integers(0, 2**31), st.floats(0, 1))
    def test_involution(self, seed, ratio):
        r = np.random.default_rng(seed)
        a, b = FeatureGrid(3, 3, r.normal(size=(9, 2))), FeatureGrid(3, 3, r.normal(size=(9, 2)))
        a1, b1, _ = exchange_tokens(a, b, ratio, seed)
        a2, b2, _ = exchange_tokens(a1, b1, ratio, seed)
        np.testing.assert_array_equal(a2.tokens, a.tokens)
        np.testing.assert_array_equal(b2.tokens, b.tokens)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            exchange_tokens(FeatureGrid(1, 2, np.ones((2, 2))), FeatureGrid(2, 1, np.ones((2, 2))))


class TestCost:
    def test_examples(self, rng):
        a = tokens(rng.normal(size=(3, 4)))
        np.testing.assert_allclose(np.diag(cost_matrix_cosine(a, a)), 0.0, atol=1e-15)
        np.testing.assert_allclose(cost_matrix_cosine(tokens([1, 0]), tokens([0, 1])), [[1.0]])
        np.testing.assert_allclose(cost_matrix_cosine(tokens([-1, 0]), tokens([1, 0])), [[2.0]])
        with pytest.raises(ValueError, match="zero-norm"):
            cost_matrix_cosine(tokens([0, 0]), tokens([1, 0]))


class TestSinkhorn:
    def test_single_atom(self):
        np.testing.assert_allclose(sinkhorn_plan(np.array([[3.7]])).pi, [[1.0]])

    def test_diagonal_coupling(self):
        plan = sinkhorn_plan(np.array([[0.0, 1], [1, 0]]), reg=0.01)
        np.testing.assert_allclose(np.diag(plan.pi), 0.5, atol=1e-3)
        assert plan.pi[0, 1] < 1e-3 and plan.pi[1, 0] < 1e-3

    def test_constant_cost(self):
        np.testing.assert_allclose(sinkhorn_plan(np.full((2, 2), 0.7)).pi, 0.25, atol=1e-12)

    def test_divergence_error_carries_residual(self, rng):
        c = rng.uniform(size=(6, 6)) * 2
        with pytest.raises(SinkhornDivergence) as info:
            sinkhorn_plan(c, reg=1e-4, max_iters=1, marginal_tol=1e-14, eps_scaling=False, newton_after=0)
        assert info.value.residual > 1e-13

    def test_validation(self):
        with pytest.raises(ValueError):
            sinkhorn_plan(np.array([[1.0, np.nan]]))
        with pytest.raises(ValueError):
            sinkhorn_plan(np.eye(2), reg=0.0)

    @given(st.integers(0, 2**31), st.sampled_from([2, 3, 4]))
    def test_marginals_and_lp_agreement(self, seed, k):
        r = np.random.default_rng(seed)
        a, b = tokens(r.normal(size=(k, 8))), tokens(r.normal(size=(k, 8)))
        loss, _, _, plan = ot_loss_with_grad(a, b, reg=1e-3)
        u = np.full(k, 1.0 / k)
        assert np.abs(plan.pi.sum(1) - u).sum() <= 1e-6
        assert np.abs(plan.pi.sum(0) - u).sum() <= 1e-6
        assert abs(loss - lp_permutation_optimum(plan.cost)) <= 5e-3

    def test_lp_oracle_matches_brute_force(self, rng):
        c = rng.uniform(size=(3, 3))
        best = min(sum(c[i, p[i]] for i in range(3)) / 3 for p in itertools.permutations(range(3)))
        assert lp_permutation_optimum(c) == pytest.approx(best)


class TestOTLoss:
    def test_examples(self, rng):
        assert ot_loss(tokens([1, 0]), tokens([0, 1])) == pytest.approx(1.0, abs=1e-9)
        assert ot_loss(tokens([[1, 0], [-1, 0]]), tokens([[1, 0], [-1, 0]]), reg=0.01) < 0.01

    def test_self_transport_vanishes_with_reg(self, rng):
        a = tokens(rng.normal(size=(4, 5)))
        losses = [ot_loss(a, a, reg=r, max_iters=5000) for r in (1.0, 0.1, 0.01, 0.001)]
        for reg, loss in zip((1.0, 0.1, 0.01, 0.001), losses):
            assert loss <= reg * np.log(4) + 1e-6
        assert all(x >= y for x, y in zip(losses, losses[1:]))
        assert losses[-1] < 1e-3

    def test_envelope_gradient(self, rng):
        from fclm.adversarial import finite_diff_check
        from fclm.checks import GRADIENT_CASES

        for _ in range(3):
            fn, theta = GRADIENT_CASES["ot_envelope"](rng)
            assert finite_diff_check(fn, theta) < 1e-4
