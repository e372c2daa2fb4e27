"""The numba and pure-numpy kernel paths must agree numerically."""

import numpy as np
import pytest

from neuralvar import kernels as k

pytestmark = pytest.mark.skipif(not k.USE_NUMBA, reason="numba path disabled")

rng = np.random.default_rng(42)


def test_relu_paths_agree():
    x = rng.normal(size=(33, 57))
    assert np.array_equal(k._relu_fwd_nb(x), k._relu_fwd_np(x))
    g = rng.normal(size=x.shape)
    assert np.array_equal(k._relu_bwd_nb(x, g), k._relu_bwd_np(x, g))


def test_softmax_xent_paths_agree():
    logits = rng.normal(size=(64, 10)) * 5
    labels = rng.integers(0, 10, size=64)
    l_nb, p_nb = k._softmax_xent_fwd_nb(logits, labels)
    l_np, p_np = k._softmax_xent_fwd_np(logits, labels)
    assert abs(l_nb - l_np) < 1e-12
    np.testing.assert_allclose(p_nb, p_np, atol=1e-14)
    g_nb = k._softmax_xent_bwd_nb(p_nb, labels, 1.7)
    g_np = k._softmax_xent_bwd_np(p_np, labels, 1.7)
    np.testing.assert_allclose(g_nb, g_np, atol=1e-14)


def test_sgd_delta_paths_agree():
    p = rng.normal(size=100)
    g = rng.normal(size=100)
    v1, v2 = rng.normal(size=100), None
    v2 = v1.copy()
    d_nb = k._sgd_delta_nb(p, g, v1, 0.1, 0.9, 1e-4)
    d_np = k._sgd_delta_np(p, g, v2, 0.1, 0.9, 1e-4)
    np.testing.assert_allclose(d_nb, d_np, atol=1e-15)
    np.testing.assert_allclose(v1, v2, atol=1e-15)


def test_adam_delta_paths_agree():
    p = rng.normal(size=100)
    g = rng.normal(size=100)
    m1, v1 = np.zeros(100), np.zeros(100)
    m2, v2 = np.zeros(100), np.zeros(100)
    b1, b2 = 0.9, 0.999
    for t in (1, 2, 3):
        scalars = (1e-3, b1, b2, 1 - b1, 1 - b2, 1 - b1**t, 1 - b2**t, 1e-8, 1e-4)
        d_nb = k._adam_delta_nb(p, g, m1, v1, *scalars)
        d_np = k._adam_delta_np(p, g, m2, v2, *scalars)
        np.testing.assert_allclose(d_nb, d_np, atol=1e-15)
