import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from finetag.errors import CorruptRecord, DimMismatch, ShapeMismatch, StaleCache
from finetag.model import (
    ModelConfig,
    ModelParams,
    backward,
    count_baseline_fc,
    count_parameters,
    forward,
    init_params,
    ratio_report,
    read_checkpoint,
    write_checkpoint,
)
from finetag.oracles import fd_gradient, max_relative_error, naive_forward
from finetag.projection import ProjectionBasis


def random_params(rng, c, k, n):
    return ModelParams(rng.standard_normal((c, k)), rng.standard_normal(k),
                       rng.standard_normal((c * k, n)), rng.standard_normal(n))


def scalar_params():
    return ModelParams(np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1))


def test_zero_map_gives_bias(rng):
    p = random_params(rng, 3, 2, 4)
    logits, _ = forward(p, np.zeros((3, 2, 2)))
    np.testing.assert_array_equal(logits, p.fc_bias)


def test_scalar_pipeline():
    p = scalar_params()
    logits, cache = forward(p, np.full((1, 1, 1), 2.0))
    assert logits[0] == 4.0
    grads, _ = backward(p, cache, np.ones(1))
    assert grads.fc_weights[0, 0] == 4.0


def test_matches_naive_composition(rng):
    for _ in range(5):
        c, k, n, h, w = rng.integers(1, 5, size=5)
        k = min(k, c)
        p = random_params(rng, c, k, n)
        alpha = rng.standard_normal((c, h, w))
        expected = naive_forward(p.proj_weights, p.proj_bias, p.fc_weights, p.fc_bias, alpha)
        np.testing.assert_allclose(forward(p, alpha)[0], expected, rtol=1e-12, atol=1e-12)


def test_zero_upstream_gradient(rng):
    p = random_params(rng, 3, 2, 2)
    _, cache = forward(p, rng.standard_normal((3, 2, 2)))
    grads, ga = backward(p, cache, np.zeros(2))
    assert all(not t.any() for t in grads.tensors().values()) and not ga.any()


@pytest.mark.parametrize("normalize", [False, True])
def test_full_gradient_finite_differences(normalize):
    rng = np.random.default_rng(31)
    for _ in range(10):
        c, k, n, h, w = 3, 2, 4, 2, 3
        p = random_params(rng, c, k, n)
        alpha = rng.standard_normal((c, h, w))
        g = rng.standard_normal(n)
        _, cache = forward(p, alpha, normalize)
        grads, ga = backward(p, cache, g)
        for name in ModelParams.NAMES:
            def fn(x, name=name):
                q = p.copy()
                setattr(q, name, x)
                return g @ forward(q, alpha, normalize)[0]
            assert max_relative_error(getattr(grads, name), fd_gradient(fn, getattr(p, name))) < 1e-6, name
        assert max_relative_error(ga, fd_gradient(lambda a: g @ forward(p, a, normalize)[0], alpha)) < 1e-6


def test_stale_cache(rng):
    p = random_params(rng, 2, 1, 2)
    _, cache = forward(p, rng.standard_normal((2, 1, 1)))
    p.version += 1
    with pytest.raises(StaleCache):
        backward(p, cache, np.ones(2))
    with pytest.raises(StaleCache):
        backward(p.copy(), cache, np.ones(2))


def test_forward_shape_errors(rng):
    p = random_params(rng, 2, 1, 2)
    with pytest.raises(ShapeMismatch):
        forward(p, np.zeros((3, 1, 1)))


def test_bias_shift_keeps_ranking_order(rng):
    p = random_params(rng, 3, 2, 5)
    alpha = rng.standard_normal((3, 2, 2))
    shifted = p.copy()
    shifted.fc_bias = p.fc_bias + 7.5
    np.testing.assert_array_equal(np.argsort(forward(p, alpha)[0]), np.argsort(forward(shifted, alpha)[0]))


class TestCounts:
    def test_head(self):
        assert count_parameters(ModelConfig(512, 20, 312)) == 3_205_452

    def test_baseline(self):
        assert count_baseline_fc(312) == 120_824_120

    def test_ratio(self):
        assert 35 <= ratio_report(ModelConfig())["ratio"] <= 42

    def test_matches_tensor_sizes(self, rng):
        cfg = ModelConfig(6, 3, 4)
        basis = ProjectionBasis(rng.standard_normal((6, 3)), np.zeros(3), "pca")
        assert init_params(cfg, basis, 0).count() == count_parameters(cfg)


class TestInit:
    def _basis(self, c=8, k=3):
        return ProjectionBasis(np.arange(c * k, dtype=float).reshape(c, k), np.ones(k), "ica")

    def test_deterministic_and_bounded(self):
        cfg = ModelConfig(8, 3, 5)
        a, b = init_params(cfg, self._basis(), 4), init_params(cfg, self._basis(), 4)
        for name in ModelParams.NAMES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        bound = np.sqrt(6 / (24 + 5))
        assert np.abs(a.fc_weights).max() <= bound
        assert not a.fc_bias.any()
        np.testing.assert_array_equal(a.proj_weights, self._basis().weights)
        assert not np.array_equal(a.fc_weights, init_params(cfg, self._basis(), 5).fc_weights)

    def test_xavier_moments(self):
        cfg = ModelConfig(64, 16, 40)
        w = init_params(cfg, self._basis(64, 16), 0).fc_weights
        bound = np.sqrt(6 / (1024 + 40))
        assert abs(w.mean()) < 0.01 * bound
        assert abs(w.var() - bound ** 2 / 3) < 0.02 * bound ** 2 / 3

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            init_params(ModelConfig(8, 4, 5), self._basis(), 0)

    def test_f32(self):
        p = init_params(ModelConfig(8, 3, 5, dtype="f32"), self._basis(), 0)
        assert all(t.dtype == np.float32 for t in p.tensors().values())


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.booleans(), st.data())
@settings(max_examples=40, deadline=None)
def test_ftmd_round_trip(c, k, n, norm, data):
    k = min(k, c)
    floats = st.floats(width=32, allow_nan=False, allow_infinity=False)
    shapes = ((c, k), (k,), (c * k, n), (n,))
    tensors = [data.draw(hnp.arrays(np.float32, s, elements=floats)) for s in shapes]
    cfg = ModelConfig(c, k, n, bcnn_normalize=norm)
    buf = io.BytesIO()
    write_checkpoint(cfg, ModelParams(*tensors), buf)
    got_cfg, got = read_checkpoint(buf.getvalue())
    assert (got_cfg.channels, got_cfg.components, got_cfg.num_classes, got_cfg.bcnn_normalize) == (c, k, n, norm)
    for t, name in zip(tensors, ModelParams.NAMES):
        assert getattr(got, name).tobytes() == t.tobytes()


def test_ftmd_flip_detected(rng):
    buf = io.BytesIO()
    write_checkpoint(ModelConfig(2, 1, 2), random_params(rng, 2, 1, 2), buf)
    raw = buf.getvalue()
    for pos in range(len(raw)):
        broken = bytearray(raw)
        broken[pos] ^= 0x80
        with pytest.raises(CorruptRecord):
            read_checkpoint(bytes(broken))


def test_ftmd_refuses_non_finite(rng):
    p = random_params(rng, 2, 1, 2)
    p.fc_bias[0] = np.nan
    with pytest.raises(ValueError):
        write_checkpoint(ModelConfig(2, 1, 2), p, io.BytesIO())
