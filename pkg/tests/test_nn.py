import numpy as np
import pytest

from fclm.adversarial import finite_diff_check
from fclm.nn import Layer, TinyNet, flatten_grads


def test_forward_shapes(rng):
    net = TinyNet.init([5, 7, 3], ["relu", "none"], rng)
    assert net(rng.normal(size=(4, 5))).shape == (4, 3)
    assert net.num_parameters == 5 * 7 + 7 + 7 * 3 + 3


def test_rejects_bad_chain():
    with pytest.raises(ValueError):
        TinyNet([Layer(np.zeros((2, 3)), np.zeros(3), "relu"), Layer(np.zeros((4, 1)), np.zeros(1), "none")])


def test_parameter_roundtrip(rng):
    net = TinyNet.init([3, 4, 2], ["relu", "sigmoid"], rng)
    clone = net.with_parameters(net.parameters())
    x = rng.normal(size=(6, 3))
    np.testing.assert_array_equal(clone(x), net(x))


@pytest.mark.parametrize("acts", [["relu", "none"], ["relu", "sigmoid"], ["none", "sigmoid"]])
def test_backward_matches_finite_differences(rng, acts):
    net = TinyNet.init([3, 5, 2], acts, rng)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def fn(theta):
        out, cache = net.with_parameters(theta).forward(x)
        grads, _ = net.with_parameters(theta).backward(cache, out - target)
        return 0.5 * np.sum((out - target) ** 2), flatten_grads(grads)

    assert finite_diff_check(fn, net.parameters()) < 1e-6
