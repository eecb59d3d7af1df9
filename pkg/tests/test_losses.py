import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from finetag.errors import AllImagesSkipped, EmptyNegativeSet, EmptyPositiveSet, NonFiniteLogit
from finetag.losses import RelevanceSets, batch_loss, hinge_rank_loss, hinge_worst_pair, smooth_rank_loss
from finetag.oracles import brute_force_hinge, brute_force_smooth, fd_gradient, max_relative_error


def rel(positives, n):
    return RelevanceSets.from_indices(positives, n)


@st.composite
def instances(draw, max_n=10, bound=20.0):
    n = draw(st.integers(2, max_n))
    logits = draw(hnp.arrays(np.float64, n, elements=st.floats(-bound, bound)))
    mask = draw(hnp.arrays(bool, n))
    assume(0 < mask.sum() < n)
    return logits, mask


class TestHinge:
    def test_satisfied(self):
        loss, grad = hinge_rank_loss([2.0, 0.0], rel([0], 2))
        assert loss == 0 and not grad.any()

    def test_zero_margin(self):
        loss, grad = hinge_rank_loss([0.0, 0.0], rel([0], 2))
        assert loss == 1.0
        np.testing.assert_array_equal(grad, [-1, 1])

    def test_worst_pair(self):
        loss, grad = hinge_rank_loss([0.0, 0.5, -0.3], rel([0], 3))
        assert loss == pytest.approx(1.5, abs=1e-12)
        np.testing.assert_array_equal(grad, [-1, 1, 0])
        assert hinge_worst_pair([0.0, 0.5, -0.3], rel([0], 3)) == (1, 0)

    def test_tie_goes_to_first_pair(self):
        assert hinge_worst_pair([0.0, 0.0, 1.0, 1.0], rel([0, 1], 4)) == (2, 0)

    def test_summed(self):
        loss, grad = hinge_rank_loss([0.0, 0.5, -0.3], rel([0], 3), summed=True)
        assert loss == pytest.approx(1.5 + 0.7)
        np.testing.assert_array_equal(grad, [-2, 1, 1])

    def test_empty_sets(self):
        with pytest.raises(EmptyPositiveSet):
            hinge_rank_loss([0.0, 1.0], [False, False])
        with pytest.raises(EmptyNegativeSet):
            hinge_rank_loss([0.0, 1.0], [True, True])

    def test_brute_force_sample(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 11))
            logits = np.round(rng.standard_normal(n), 1)  # rounding forces ties
            mask = rng.random(n) < 0.5
            if not 0 < mask.sum() < n:
                continue
            loss, grad = hinge_rank_loss(logits, mask)
            ref_loss, pair = brute_force_hinge(logits, np.flatnonzero(mask))
            assert loss == ref_loss
            assert hinge_worst_pair(logits, mask) == pair


class TestSmooth:
    def test_log2(self):
        loss, grad = smooth_rank_loss([0.0, 0.0], rel([0], 2))
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_margin_two(self):
        loss, _ = smooth_rank_loss([2.0, 0.0], rel([0], 2))
        assert loss == pytest.approx(0.126928, abs=1e-6)
        assert loss == pytest.approx(brute_force_smooth([2.0, 0.0], [0]), abs=1e-15)

    def test_log3(self):
        loss, grad = smooth_rank_loss([0.0, 0.0, 0.0], rel([0], 3))
        assert loss == pytest.approx(math.log(3), abs=1e-12)
        np.testing.assert_allclose(grad, [-2 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_non_finite_logit(self):
        with pytest.raises(NonFiniteLogit):
            smooth_rank_loss([np.inf, 0.0], rel([0], 2))

    @pytest.mark.parametrize("scale", [1e4, -1e4])
    def test_large_magnitude(self, scale, rng):
        logits = rng.standard_normal(8) * scale
        loss, grad = smooth_rank_loss(logits, rel([0, 3, 5], 8))
        assert math.isfinite(loss) and np.all(np.isfinite(grad))
        assert abs(grad.sum()) < 1e-9

    def test_large_violation_is_linear(self):
        loss, _ = smooth_rank_loss([0.0, 1e4], rel([0], 2))
        assert loss == pytest.approx(1e4, rel=1e-12)

    @given(instances(bound=5.0))
    @settings(max_examples=100, deadline=None)
    def test_matches_pair_sum(self, inst):
        logits, mask = inst
        loss, _ = smooth_rank_loss(logits, mask)
        assert loss == pytest.approx(brute_force_smooth(logits, np.flatnonzero(mask)), rel=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            mask = np.zeros(n, bool)
            mask[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = True
            logits = rng.standard_normal(n) * 2
            _, grad = smooth_rank_loss(logits, mask)
            assert max_relative_error(grad, fd_gradient(lambda x: smooth_rank_loss(x, mask)[0], logits)) < 1e-6


class TestInvariants:
    @given(instances(), st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_shift_invariance(self, inst, c):
        logits, mask = inst
        for fn in (smooth_rank_loss, hinge_rank_loss):
            l0, g0 = fn(logits, mask)
            l1, g1 = fn(logits + c, mask)
            assert abs(l0 - l1) < 1e-9
            np.testing.assert_allclose(g0, g1, atol=1e-9)

    @given(instances(bound=1e4))
    @settings(max_examples=200, deadline=None)
    def test_nonneg_and_zero_sum(self, inst):
        logits, mask = inst
        for fn in (smooth_rank_loss, hinge_rank_loss):
            loss, grad = fn(logits, mask)
            assert loss >= 0 and math.isfinite(loss)
            assert abs(grad.sum()) < 1e-9

    @given(instances(bound=5.0))
    @settings(max_examples=100, deadline=None)
    def test_smooth_strictly_positive(self, inst):
        assert smooth_rank_loss(*inst)[0] > 0

    @given(instances(bound=5.0), st.data())
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, inst, data):
        logits, mask = inst
        j = data.draw(st.integers(0, logits.size - 1))
        base = smooth_rank_loss(logits, mask)[0]
        bumped = logits.copy()
        bumped[j] += 0.5
        new = smooth_rank_loss(bumped, mask)[0]
        assert (new < base) if mask[j] else (new > base)


class TestBatch:
    def test_mean_of_copies(self):
        loss, grad, skipped = batch_loss(np.zeros((2, 2)), [[1, 0], [1, 0]])
        assert loss == pytest.approx(math.log(2)) and skipped == 0
        np.testing.assert_allclose(grad, [[-0.25, 0.25], [-0.25, 0.25]])

    def test_skip(self):
        loss, grad, skipped = batch_loss(np.zeros((2, 2)), [[1, 0], [0, 0]])
        assert skipped == 1 and loss == pytest.approx(math.log(2))
        assert not grad[1].any()

    def test_all_skipped(self):
        with pytest.raises(AllImagesSkipped):
            batch_loss(np.zeros((2, 2)), [[1, 1], [0, 0]])

    @pytest.mark.parametrize("which", ["smooth", "hinge"])
    def test_matches_loop(self, which, rng):
        logits = rng.standard_normal((6, 5))
        labels = rng.random((6, 5)) < 0.4
        loss, grad, skipped = batch_loss(logits, labels, which)
        fn = smooth_rank_loss if which == "smooth" else hinge_rank_loss
        rows = [i for i in range(6) if 0 < labels[i].sum() < 5]
        ref = [fn(logits[i], labels[i]) for i in rows]
        assert skipped == 6 - len(rows)
        assert abs(loss - np.mean([r[0] for r in ref])) < 1e-12
        for i, r in zip(rows, ref):
            np.testing.assert_allclose(grad[i], r[1] / len(rows), atol=1e-12)
