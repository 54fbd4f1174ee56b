import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fclm.compositor import center_crop, composite_alpha, make_pair, round_half_away


def rgb(rng, h, w):
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, 2.4999])), [1, 2, 3, -1, 2])


def test_composite_examples(rng):
    f, b = rgb(rng, 4, 5), rgb(rng, 4, 5)
    np.testing.assert_array_equal(composite_alpha(f, np.ones((4, 5)), b), f)
    np.testing.assert_array_equal(composite_alpha(f, np.zeros((4, 5)), b), b)
    out = composite_alpha(np.full((1, 1, 3), 200, np.uint8), np.array([[0.5]]), np.full((1, 1, 3), 100, np.uint8))
    assert out[0, 0, 0] == 150
    with pytest.raises(ValueError):
        composite_alpha(f, np.ones((4, 4)), b)


def test_center_crop(rng):
    img = rgb(rng, 10, 12)
    np.testing.assert_array_equal(center_crop(img, 6, 8), img[2:8, 2:10])
    with pytest.raises(ValueError, match="smaller"):
        center_crop(img, 11, 4)


def test_pool_of_two_and_determinism(rng):
    f, alpha = rgb(rng, 6, 6), rng.uniform(size=(6, 6))
    pool = [("x", rgb(rng, 6, 6)), ("y", rgb(rng, 8, 8))]
    p1, p2 = make_pair(f, alpha, pool, 11), make_pair(f, alpha, pool, 11)
    assert {p1.background_a_id, p1.background_b_id} == {"x", "y"}
    np.testing.assert_array_equal(p1.image_a, p2.image_a)
    np.testing.assert_array_equal(p1.image_b, p2.image_b)
    with pytest.raises(ValueError):
        make_pair(f, alpha, pool[:1], 0)


@given(st.integers(0, 2**31))
def test_pair_identities(seed):
    r = np.random.default_rng(seed)
    h, w = 9, 7
    f = rgb(r, h, w)
    alpha = r.uniform(size=(h, w))
    alpha[r.uniform(size=(h, w)) < 0.3] = 1.0
    alpha[r.uniform(size=(h, w)) < 0.3] = 0.0
    pool = [(str(i), rgb(r, h, w)) for i in range(3)]
    pair = make_pair(f, alpha, pool, seed)
    bgs = dict(pool)
    assert pair.background_a_id != pair.background_b_id
    assert np.array_equal(pair.image_a[alpha == 1], pair.image_b[alpha == 1])
    assert np.array_equal(pair.image_a[alpha == 0], bgs[pair.background_a_id][alpha == 0])
    diff = pair.image_a.astype(float) - pair.image_b.astype(float)
    expected = (1 - alpha)[..., None] * (bgs[pair.background_a_id].astype(float) - bgs[pair.background_b_id])
    assert np.abs(diff - expected).max() <= 1.0


def test_round_trip_over_black(rng):
    f = rgb(rng, 5, 5)
    alpha = rng.uniform(size=(5, 5))
    alpha[::2] = 1.0
    c = composite_alpha(f, alpha, np.zeros_like(f))
    ones = alpha == 1
    np.testing.assert_array_equal((c[ones] / alpha[ones][:, None]).astype(np.uint8), f[ones])
