import numpy as np
import pytest

from i2preg import gradcheck


def test_central_difference_of_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    x = np.array([0.3, -0.7])
    num = gradcheck.central_difference(lambda z: 0.5 * z @ A @ z, x)
    assert np.allclose(num, A @ x, atol=1e-9)


def test_relative_error_is_norm_based():
    assert gradcheck.relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert gradcheck.relative_error([0.0], [0.0]) == 0.0
    assert gradcheck.relative_error([1.0, 0.0], [-1.0, 0.0]) == 2.0


@pytest.mark.parametrize("name", gradcheck.LOSSES)
def test_each_loss_passes(name):
    results = gradcheck.check_loss(name, trials=20, seed=1)
    assert all(r.passed for r in results), max(r.rel_error for r in results)


@pytest.mark.parametrize("name", gradcheck.LOSSES)
def test_sign_flip_is_caught(name):
    results = gradcheck.check_loss(name, trials=5, seed=2, sign_flip=True)
    assert not any(r.passed for r in results)
    assert min(r.rel_error for r in results) > 1.0


def test_unknown_loss_rejected():
    with pytest.raises(ValueError):
        gradcheck.make_problem("nope", np.random.default_rng(0), 0)
