import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kft.tensor import (Tensor, ShapeError, NondeterministicFunctionError,
                        softmax, log_softmax, concat, finite_diff_check)


class TestElementwise:
    def test_add(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_relu(self):
        out = Tensor([-1.0, 0.0, 2.0]).relu()
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_mul_identity_exact(self):
        x = Tensor(np.random.default_rng(0).standard_normal(7))
        out = x * 1.0
        np.testing.assert_array_equal(out.data, x.data)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_scalar_broadcast(self):
        out = Tensor([1.0, 2.0]) * 2.0
        np.testing.assert_array_equal(out.data, [2.0, 4.0])

    def test_per_channel_broadcast(self):
        x = Tensor(np.ones((2, 3, 4)))
        v = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
        out = x * v
        assert out.shape == (2, 3, 4)
        np.testing.assert_array_equal(out.data[0, :, 0], [1.0, 2.0, 3.0])


class TestMatmul:
    def test_identity(self):
        m = np.random.default_rng(1).standard_normal((3, 4))
        out = Tensor(np.eye(3)) @ Tensor(m)
        np.testing.assert_allclose(out.data, m)

    def test_hand_arithmetic(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    expected[i, j] += a[i, k] * b[k, j]
        out = Tensor(a) @ Tensor(b)
        assert np.abs(out.data - expected).max() < 1e-12

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_batched(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((2, 4, 3, 5))
        b = rng.standard_normal((2, 4, 5, 2))
        out = Tensor(a) @ Tensor(b)
        np.testing.assert_allclose(out.data, a @ b)


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, 0.25)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(6)
        a = softmax(Tensor(x), axis=0).data
        b = softmax(Tensor(x + 123.4), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_no_overflow_on_huge_logits(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            softmax(Tensor([1.0, 2.0]), axis=3)

    @given(st.lists(st.floats(min_value=-1e3, max_value=1e3),
                    min_size=2, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, vals):
        out = softmax(Tensor(np.array(vals)), axis=0)
        assert abs(out.data.sum() - 1.0) < 1e-6
        assert np.all(out.data >= 0)


class TestReshapePermute:
    def test_reshape_preserves_flat_order(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        out = x.reshape(3, 2)
        np.testing.assert_array_equal(out.data.reshape(-1), np.arange(6))

    def test_permute_then_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 4, 5))
        perm = (2, 0, 3, 1)
        inv = tuple(np.argsort(perm))
        out = Tensor(x).permute(perm).permute(inv)
        np.testing.assert_array_equal(out.data, x)

    def test_flatten_feature_map(self):
        x = Tensor(np.zeros((832, 8, 8, 8)))
        out = x.reshape(832, 512)
        assert out.shape == (832, 512)

    def test_reshape_element_count_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).reshape(4, 2)

    def test_bad_permutation(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).permute(0, 0)


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_fanout_accumulation_exact(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        y = x + x
        (y * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x * 2.0).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = x.sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            y = softmax(x @ x, axis=1)
            (y * y).sum().backward()
            return x.grad.copy()

        np.testing.assert_array_equal(run(), run())

    @pytest.mark.parametrize("seed", range(20))
    def test_composite_graph_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((4, 4))

        def f(t):
            h = (t @ w).relu()
            s = softmax(h, axis=1)
            return (s * h).sum() + (t ** 2.0).mean()

        rep = finite_diff_check(f, Tensor(rng.standard_normal((3, 4))), tol=1e-6)
        assert rep.passed, rep

    def test_concat_backward(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        out = concat([a, b], axis=0)
        (out * Tensor([1.0, 2.0, 3.0])).sum().backward()
        np.testing.assert_array_equal(a.grad, [1.0, 2.0])
        np.testing.assert_array_equal(b.grad, [3.0])

    def test_getitem_backward(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        x[0].sum().backward()
        np.testing.assert_array_equal(x.grad, [[1, 1, 1], [0, 0, 0]])

    def test_log_softmax_matches_softmax_log(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 5))
        np.testing.assert_allclose(log_softmax(Tensor(x), axis=1).data,
                                   np.log(softmax(Tensor(x), axis=1).data),
                                   atol=1e-12)


class TestFiniteDiffCheck:
    def test_relu_sum_away_from_zero(self):
        x = Tensor(np.array([1.0, -2.0, 3.0, -0.5]))
        rep = finite_diff_check(lambda t: t.relu().sum(), x, tol=1e-6)
        assert rep.passed and not rep.excluded

    def test_softmax_then_dot(self):
        rng = np.random.default_rng(11)
        v = rng.standard_normal(5)
        rep = finite_diff_check(
            lambda t: (softmax(t, axis=0) * v).sum(),
            Tensor(rng.standard_normal(5)), tol=1e-6)
        assert rep.passed, rep

    def test_exact_relu_zero_flagged_excluded(self):
        x = Tensor(np.array([1.0, 0.0, -1.0]))
        rep = finite_diff_check(lambda t: (t.relu() * 2.0).sum(), x, tol=1e-6)
        assert (0 - 1,) not in rep.excluded  # sanity on tuple form
        assert (1,) in rep.excluded

    def test_nondeterministic_function_rejected(self):
        state = {"n": 0}

        def f(t):
            state["n"] += 1
            return (t * float(state["n"])).sum()

        with pytest.raises(NondeterministicFunctionError):
            finite_diff_check(f, Tensor(np.ones(3)))

    def test_requires_float64(self):
        with pytest.raises(ValueError, match="float64"):
            finite_diff_check(lambda t: t.sum(),
                              Tensor(np.ones(3, dtype=np.float32)))
