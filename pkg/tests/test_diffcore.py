import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualmatch import diffcore as dc
from oracles import central_difference, naive_matmul, rel_error


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.5, -2.0], [0.25, 4.0]])
        np.testing.assert_array_equal(dc.matmul(np.eye(2), a).data, a)

    def test_hand_arithmetic(self):
        out = dc.matmul([[1, 2], [3, 4]], [[1], [1]])
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(dc.matmul(a, b).data, naive_matmul(a, b), rtol=1e-14, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_both_operands(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        wa, wb = dc.leaf(a), dc.leaf(b)
        ga, gb = dc.gradient(dc.sum(dc.mul(dc.matmul(wa, wb), dc.matmul(wa, wb))), [wa, wb])
        f = lambda: float(((a @ b) ** 2).sum())
        na, nb = central_difference(f, [a, b])
        assert rel_error(ga, na).max() < 1e-6
        assert rel_error(gb, nb).max() < 1e-6


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(dc.softmax([[0.0, 0.0, 0.0]]).data, [[1 / 3] * 3], atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = dc.softmax([[1000.0, 0.0, 0.0]]).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-300)

    def test_matches_extended_precision_formula(self):
        mpmath.mp.dps = 50
        xs = [1, 2, 3]
        denom = sum(mpmath.e**x for x in xs)
        expected = [float(mpmath.e**x / denom) for x in xs]
        np.testing.assert_allclose(dc.softmax([xs]).data[0], expected, rtol=1e-15)

    def test_non_finite_input(self):
        with pytest.raises(dc.NonFiniteError):
            dc.softmax(np.array([[np.nan, 0.0]]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, logits):
        p = dc.softmax(logits).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        x = np.array([[0.3, -1.2, 2.0]])
        np.testing.assert_allclose(dc.softmax(x).data, dc.softmax(x + 17.0).data, atol=1e-15)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert dc.cross_entropy([1.0, 0.0], [1.0, 0.0]).item() == pytest.approx(0.0, abs=1e-11)

    def test_ln2(self):
        assert dc.cross_entropy([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_soft_target(self):
        expected = -(0.3 * math.log(0.6) + 0.7 * math.log(0.4))
        assert dc.cross_entropy([0.3, 0.7], [0.6, 0.4]).item() == pytest.approx(expected, abs=1e-15)

    def test_hard_zero_prediction_is_clamped(self):
        val = dc.cross_entropy([0.0, 1.0], [1.0, 0.0]).item()
        assert val == pytest.approx(-math.log(1e-12))

    @pytest.mark.parametrize(
        "target, pred", [([-0.1, 1.1], [0.5, 0.5]), ([0.5, 0.6], [0.5, 0.5]), ([1, 0], [0.7, 0.7])]
    )
    def test_rejects_non_distributions(self, target, pred):
        with pytest.raises(ValueError):
            dc.cross_entropy(target, pred)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, 4, elements=st.floats(0.01, 1.0)),
        arrays(np.float64, 4, elements=st.floats(0.01, 1.0)),
    )
    def test_gibbs_inequality(self, a, b):
        p, q = a / a.sum(), b / b.sum()
        h_pp = dc.cross_entropy(p, p).item()
        entropy = -float(np.sum(p * np.log(p)))
        assert h_pp >= 0
        assert h_pp == pytest.approx(entropy, abs=1e-12)
        assert dc.cross_entropy(p, q).item() >= h_pp - 1e-12

    def test_gradient_through_soft_target(self):
        t = np.array([[0.2, 0.5, 0.3]])
        p = np.array([[0.1, 0.6, 0.3]])
        wt, wp = dc.leaf(t), dc.leaf(p)
        gt, gp = dc.gradient(dc.sum(dc.cross_entropy(wt, wp)), [wt, wp])
        np.testing.assert_allclose(gt, -np.log(p))
        np.testing.assert_allclose(gp, -t / p)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(dc.l2_normalize([3.0, 4.0]).data, [0.6, 0.8], atol=1e-16)

    def test_unit_vector_is_fixed(self):
        v = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(dc.l2_normalize(v).data, v)

    def test_random_norm(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            out = dc.l2_normalize(rng.standard_normal(7)).data
            assert abs(math.sqrt(float(np.sum(out**2))) - 1) < 1e-12

    def test_dot_is_cosine(self):
        rng = np.random.default_rng(6)
        u, v = rng.standard_normal(5), rng.standard_normal(5)
        cos = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        assert dc.l2_normalize(u).data @ dc.l2_normalize(v).data == pytest.approx(cos, abs=1e-14)

    def test_near_zero_norm(self):
        with pytest.raises(ValueError):
            dc.l2_normalize([1e-14, 0.0])

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4))
        c = rng.standard_normal((3, 4))
        w = dc.leaf(x)
        (g,) = dc.gradient(dc.sum(dc.mul(dc.l2_normalize(w), c)), [w])
        f = lambda: float(np.sum(x / np.linalg.norm(x, axis=1, keepdims=True) * c))
        assert rel_error(g, central_difference(f, [x])[0]).max() < 1e-6


class TestGradient:
    def test_sum_gives_ones(self):
        w = dc.leaf(np.arange(6.0).reshape(2, 3))
        (g,) = dc.gradient(dc.sum(w), [w])
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_half_square_gives_identity(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        w = dc.leaf(x)
        (g,) = dc.gradient(dc.mul(dc.sum(dc.mul(w, w)), 0.5), [w])
        np.testing.assert_array_equal(g, x)

    def test_twice_is_identical(self):
        rng = np.random.default_rng(1)
        w = dc.leaf(rng.standard_normal((4, 3)))
        loss = dc.sum(dc.log(dc.softmax(w), clamp=1e-12))
        g1 = dc.gradient(loss, [w])[0]
        g2 = dc.gradient(loss, [w])[0]
        assert np.array_equal(g1, g2)

    def test_leaf_not_on_tape(self):
        a, b = dc.leaf([1.0]), dc.leaf([2.0])
        with pytest.raises(KeyError):
            dc.gradient(dc.sum(a), [b])
        np.testing.assert_array_equal(dc.gradient(dc.sum(a), [b], allow_unused=True)[0], [0.0])

    def test_non_scalar_loss(self):
        w = dc.leaf([1.0, 2.0])
        with pytest.raises(dc.ShapeError):
            dc.gradient(w, [w])

    def test_shared_subexpression_accumulates(self):
        w = dc.leaf([2.0])
        y = dc.mul(w, w)
        (g,) = dc.gradient(dc.sum(dc.add(y, y)), [w])
        np.testing.assert_allclose(g, [8.0])

    def test_repeated_take_accumulates(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        w = dc.leaf(x)
        (g,) = dc.gradient(dc.sum(dc.take(w, [0, 0, 1])), [w])
        np.testing.assert_array_equal(g, [[2, 2], [1, 1]])

    def test_non_finite_values_are_errors(self):
        with pytest.raises(dc.NonFiniteError):
            dc.exp(dc.leaf([1000.0]))

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(11)
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 4))
        o1 = dc.softmax(dc.matmul(a, b)).data
        o2 = dc.softmax(dc.matmul(a, b)).data
        assert o1.tobytes() == o2.tobytes()

    def test_tensors_are_immutable(self):
        t = dc.Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0
