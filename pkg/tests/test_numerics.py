import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fclm.numerics import KL_EPS, cosine_similarity, kl_divergence, row_softmax

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)


def test_cosine_errors():
    with pytest.raises(ValueError, match="degenerate vector"):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError, match="length mismatch"):
        cosine_similarity([1, 0, 0], [1, 0])


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_cosine_self_is_one(a):
    assume(np.linalg.norm(a) > 1e-6)
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(row_softmax([[0.0, 0.0]]), [[0.5, 0.5]])
    np.testing.assert_allclose(row_softmax([[math.log(3), 0.0]]), [[0.75, 0.25]], atol=1e-9)
    np.testing.assert_allclose(row_softmax([[5.0, 5, 5]], temperature=2.0), [[1 / 3] * 3])


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        row_softmax([[np.inf, 0.0]])
    with pytest.raises(ValueError):
        row_softmax([[1.0, 0.0]], temperature=0.0)


@given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(m):
    np.testing.assert_allclose(row_softmax(m).sum(axis=1), 1.0, atol=1e-9)


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-4)
    expected = 0.5 * math.log(0.5 / KL_EPS) + 0.5 * math.log(0.5)
    got = kl_divergence([0.5, 0.5], [1, 0])
    assert math.isfinite(got)
    assert got == pytest.approx(expected, rel=1e-9)


def test_kl_errors():
    with pytest.raises(ValueError):
        kl_divergence([1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        kl_divergence([1.5, -0.5], [0.5, 0.5])


probs = arrays(np.float64, 4, elements=st.floats(0.01, 1.0)).map(lambda v: v / v.sum())


@given(probs, probs)
def test_kl_nonnegative_and_zero_iff_equal(p, q):
    d = kl_divergence(p, q)
    assert d >= -1e-15
    if np.allclose(p, q, atol=1e-9):
        assert d == pytest.approx(0.0, abs=1e-9)
    else:
        assert d > 0
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
