import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from finetag.bilinear import (
    bcnn_normalize_backward,
    bcnn_normalize_forward,
    bilinear_pool_backward,
    bilinear_pool_forward,
)
from finetag.errors import ShapeMismatch, SpatialShapeMismatch
from finetag.oracles import fd_gradient, max_relative_error, naive_bilinear

small = st.floats(-5, 5, allow_nan=False)


def test_single_outer_product():
    out = bilinear_pool_forward(np.array([1.0, 2.0]).reshape(2, 1, 1), np.array([3.0, 4.0]).reshape(2, 1, 1))
    np.testing.assert_array_equal(out, [[3, 4], [6, 8]])


def test_self_pooling_is_psd(rng):
    alpha = rng.standard_normal((6, 3, 3))
    gram = bilinear_pool_forward(alpha, alpha)
    np.testing.assert_allclose(gram, gram.T, atol=1e-12)
    assert np.linalg.eigvalsh(gram).min() >= -1e-9


def test_naive_loop(rng):
    alpha, beta = rng.standard_normal((5, 3, 4)), rng.standard_normal((2, 3, 4))
    np.testing.assert_allclose(bilinear_pool_forward(alpha, beta), naive_bilinear(alpha, beta), rtol=1e-13, atol=1e-13)


def test_full_size_shape(rng):
    alpha = rng.standard_normal((512, 14, 14)).astype(np.float32)
    beta = rng.standard_normal((20, 14, 14)).astype(np.float32)
    out = bilinear_pool_forward(alpha, beta)
    assert out.shape == (512, 20) and out.dtype == np.float64


def test_spatial_mismatch():
    with pytest.raises(SpatialShapeMismatch):
        bilinear_pool_forward(np.zeros((2, 3, 3)), np.zeros((2, 3, 2)))


def test_backward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bilinear_pool_backward(np.zeros((3, 3)), np.zeros((2, 1, 1)), np.zeros((3, 1, 1)))


def test_backward_zero(rng):
    ga, gb = bilinear_pool_backward(np.zeros((3, 2)), rng.standard_normal((3, 2, 2)), rng.standard_normal((2, 2, 2)))
    assert not ga.any() and not gb.any()


def test_backward_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(25):
        c1, c2, h, w = rng.integers(1, 5, size=4)
        alpha, beta = rng.standard_normal((c1, h, w)), rng.standard_normal((c2, h, w))
        g = rng.standard_normal((c1, c2))
        ga, gb = bilinear_pool_backward(g, alpha, beta)
        assert max_relative_error(ga, fd_gradient(lambda a: np.sum(g * bilinear_pool_forward(a, beta)), alpha)) < 1e-6
        assert max_relative_error(gb, fd_gradient(lambda b: np.sum(g * bilinear_pool_forward(alpha, b)), beta)) < 1e-6


@given(hnp.arrays(np.float64, (3, 2, 2), elements=small), hnp.arrays(np.float64, (2, 2, 2), elements=small),
       hnp.arrays(np.float64, (2, 2, 2), elements=small), st.floats(-3, 3))
@settings(max_examples=60, deadline=None)
def test_bilinear_in_second_argument(alpha, b1, b2, s):
    lhs = bilinear_pool_forward(alpha, s * b1 + b2)
    rhs = s * bilinear_pool_forward(alpha, b1) + bilinear_pool_forward(alpha, b2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(hnp.arrays(np.float64, (3, 2, 3), elements=small), hnp.arrays(np.float64, (2, 2, 3), elements=small),
       st.permutations(range(6)))
@settings(max_examples=60, deadline=None)
def test_invariant_to_spatial_permutation_and_transposes(alpha, beta, perm):
    out = bilinear_pool_forward(alpha, beta)
    pa = alpha.reshape(3, 6)[:, perm].reshape(3, 2, 3)
    pb = beta.reshape(2, 6)[:, perm].reshape(2, 2, 3)
    np.testing.assert_allclose(bilinear_pool_forward(pa, pb), out, atol=1e-9)
    np.testing.assert_allclose(bilinear_pool_forward(beta, alpha), out.T, atol=1e-12)


def test_bcnn_normalize_unit_norm_and_gradient(rng):
    pooled = rng.standard_normal((4, 3))
    z, cache = bcnn_normalize_forward(pooled)
    assert abs(np.linalg.norm(z) - 1) < 1e-12
    g = rng.standard_normal((4, 3))
    analytic = bcnn_normalize_backward(g, cache)
    numeric = fd_gradient(lambda p: np.sum(g * bcnn_normalize_forward(p)[0]), pooled)
    assert max_relative_error(analytic, numeric) < 1e-6
