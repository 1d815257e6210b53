import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathogenx import tensor as T
from pathogenx.tensor import OPS, DomainError, ShapeError, Tensor, finite_difference_check

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(max_side=5):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ x).data, x.data)

    def test_hand_product(self):
        assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, loop_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_vector_cases(self, rng):
        a, v = rng.normal(size=(3, 4)), rng.normal(size=4)
        np.testing.assert_allclose((Tensor(a) @ Tensor(v)).data, a @ v, atol=1e-12)
        np.testing.assert_allclose((Tensor(v) @ Tensor(a.T)).data, v @ a.T, atol=1e-12)


class TestElementwise:
    @given(matrices())
    def test_identities(self, x):
        t = Tensor(x)
        np.testing.assert_array_equal((t + 0.0).data, x)
        np.testing.assert_array_equal((t * 1.0).data, x)
        np.testing.assert_array_equal((t - t).data, np.zeros_like(x))

    def test_row_and_column_broadcast(self, rng):
        x, row, col = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(3, 1))
        np.testing.assert_allclose((Tensor(x) + Tensor(row)).data, x + row)
        np.testing.assert_allclose((Tensor(x) * Tensor(col)).data, x * col)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_division_by_zero_is_domain_error(self):
        with pytest.raises(DomainError):
            Tensor([1.0, 2.0]) / Tensor([1.0, 0.0])

    def test_broadcast_gradient_sums_back(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        row = Tensor(rng.normal(size=4), requires_grad=True)
        (x * row).sum().backward()
        np.testing.assert_allclose(row.grad, x.data.sum(axis=0))
        np.testing.assert_allclose(x.grad, np.broadcast_to(row.data, (3, 4)))


class TestMaps:
    def test_examples(self):
        assert Tensor([0.0]).exp().data.tolist() == [1.0]
        assert Tensor([-1.0, 2.0]).relu().data.tolist() == [0.0, 2.0]

    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_log_exp_inverse(self, x):
        np.testing.assert_allclose(Tensor(x).exp().log().data, x, atol=1e-12)

    @pytest.mark.parametrize("method", ["log", "sqrt"])
    def test_domain(self, method):
        with pytest.raises(DomainError):
            getattr(Tensor([1.0, 0.0]), method)()
        with pytest.raises(DomainError):
            getattr(Tensor([-1.0]), method)()


class TestReductions:
    def test_examples(self):
        assert Tensor([1.0, 2.0, 3.0]).sum().item() == 6.0
        assert Tensor(np.full((2, 3), 2.5)).mean().item() == 2.5

    def test_axis_sum_matches_loop(self, rng):
        x = rng.normal(size=(2, 3))
        expected = [sum(x[i, j] for i in range(2)) for j in range(3)]
        np.testing.assert_allclose(Tensor(x).sum(axis=0).data, expected, atol=1e-15)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))).sum(axis=2)

    def test_max_splits_gradient_among_ties(self):
        x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
        x.max().backward()
        assert x.grad.tolist() == [0.0, 0.5, 0.5]


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(Tensor([0.0, 0.0, 0.0]).softmax().data, [1 / 3] * 3, atol=1e-15)

    def test_direct_formula(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(Tensor([1.0, 2.0, 3.0]).softmax().data, e / e.sum(), atol=1e-15)

    def test_large_inputs_are_stable(self):
        out = Tensor([1000.0, 1000.0]).softmax().data
        np.testing.assert_allclose(out, [0.5, 0.5])

    @given(matrices(), finite)
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        s = Tensor(x).softmax(axis=1).data
        assert np.all(s > 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(Tensor(x + c).softmax(axis=1).data, s, atol=1e-12)


class TestStructural:
    @given(matrices())
    def test_transpose_involution(self, x):
        np.testing.assert_array_equal(Tensor(x).T.T.data, x)

    def test_reshape_row_major(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert x.reshape(3, 2).data.tolist() == [[0, 1], [2, 3], [4, 5]]

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))).reshape(4, 2)

    @given(matrices(max_side=6))
    def test_slice_concat_partition(self, x):
        t = Tensor(x)
        m = x.shape[0]
        cut = m // 2 if m > 1 else 1
        parts = [t.slice_rows(0, cut)] + ([t.slice_rows(cut, m)] if cut < m else [])
        np.testing.assert_array_equal(T.concat_rows(parts).data, x)

    def test_pad_rows_cycles_from_start(self):
        x = Tensor(np.arange(3.0)[:, None])
        assert x.pad_rows(4).data[:, 0].tolist() == [0.0, 1.0, 2.0, 0.0]
        assert x.pad_rows(7).data[:, 0].tolist() == [0, 1, 2, 0, 1, 2, 0]

    def test_pad_rows_gradient_accumulates_repeats(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        x.pad_rows(7).sum().backward()
        assert x.grad[:, 0].tolist() == [3.0, 2.0, 2.0]


class TestBackward:
    def test_square_sum(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_linear_gradient_is_column_sum(self, rng):
        a = rng.normal(size=(3, 4))
        x = Tensor(rng.normal(size=4), requires_grad=True)
        (Tensor(a) @ x).sum().backward()
        np.testing.assert_allclose(x.grad, a.sum(axis=0))

    def test_fan_in_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x * 3.0 + x
        y.sum().backward()
        assert x.grad.tolist() == [8.0]

    def test_non_scalar_root(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).exp().backward()

    def test_repeated_backward_resets(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        y = (x * x).sum()
        y.backward()
        first = x.grad.copy()
        y.backward()
        np.testing.assert_array_equal(x.grad, first)

    def test_deterministic(self, rng):
        a = rng.normal(size=(4, 4))

        def grads():
            x = Tensor(a, requires_grad=True)
            ((x @ x).softmax(axis=1) * x).sum().backward()
            return x.grad

        assert grads().tobytes() == grads().tobytes()

    def test_shapes_match_values(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        mid = x.exp()
        (mid.sum(axis=1) * Tensor(np.arange(3.0))).sum().backward()
        assert mid.grad.shape == mid.shape and x.grad.shape == x.shape

    def test_no_tape_without_grad(self):
        y = Tensor([1.0]) + Tensor([2.0])
        assert y.op is None and not y.requires_grad


class TestFiniteDifferences:
    def test_square_sum(self, rng):
        assert finite_difference_check(lambda x: (x * x).sum(), [rng.normal(size=6)]) < 1e-6

    def test_constant_function_absolute(self, rng):
        err = finite_difference_check(lambda x: x.softmax().sum(), [rng.normal(size=5)], relative=False)
        assert err < 1e-8

    def test_cox_loss_five_subjects(self, rng):
        from pathogenx.losses import cox_loss

        times = np.array([2.0, 1.0, 3.0, 3.0, 5.0])
        events = np.array([1, 1, 0, 1, 1])
        assert finite_difference_check(lambda r: cox_loss(r, times, events), [rng.normal(size=5)]) < 1e-4

    def test_detects_wrong_rule(self, monkeypatch, rng):
        op = OPS["exp"]
        monkeypatch.setitem(OPS, "exp", T.Op("exp", op.forward, lambda ctx, g: (2.0 * op.backward(ctx, g)[0],)))
        assert finite_difference_check(lambda x: x.exp().sum(), [rng.normal(size=3)]) > 0.1


class TestFusedOps:
    def test_layer_norm_matches_composed(self, rng):
        x, gain, offset = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
        xt = Tensor(x)
        centred = xt - xt.mean(axis=1, keepdims=True)
        var = (centred * centred).mean(axis=1, keepdims=True)
        composed = centred / (var + 1e-5).sqrt() * Tensor(gain) + Tensor(offset)
        fused = T.layer_norm(Tensor(x), Tensor(gain), Tensor(offset))
        np.testing.assert_allclose(fused.data, composed.data, atol=1e-12)

    def test_attention_matches_per_head_loop(self, rng):
        q, k, v = rng.normal(size=(2, 6)), rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        out = T.attention(Tensor(q), Tensor(k), Tensor(v), heads=3).data
        for h in range(3):
            cols = slice(2 * h, 2 * h + 2)
            s = q[:, cols] @ k[:, cols].T / np.sqrt(2)
            w = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
            np.testing.assert_allclose(out[:, cols], w @ v[:, cols], atol=1e-12)

    def test_depthwise_conv_matches_direct(self, rng):
        x, k = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
        out = T.depthwise_conv2d(Tensor(x), Tensor(k)).data
        expected = np.zeros_like(x)
        for i in range(3):
            for j in range(3):
                for a in range(3):
                    for b in range(3):
                        ii, jj = i + a - 1, j + b - 1
                        if 0 <= ii < 3 and 0 <= jj < 3:
                            expected[i, j] += x[ii, jj] * k[a, b]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.depthwise_conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((2, 2, 1))))


@settings(max_examples=25, deadline=None)
@given(
    st.tuples(st.integers(1, 4), st.integers(1, 4)),
    st.sampled_from(["add", "sub", "mul", "exp", "neg", "softmax", "transpose", "sum"]),
)
def test_random_shape_gradients(shape, name):
    """Gradient correctness and shape discipline for random shapes and N(0,1) inputs."""
    rng = np.random.default_rng(hash((shape, name)) % 2**32)
    x, y = rng.normal(size=shape), rng.normal(size=shape)
    w = Tensor(rng.normal(size=shape))
    fns = {
        "add": lambda a, b: ((a + b) * w).sum(),
        "sub": lambda a, b: ((a - b) * w).sum(),
        "mul": lambda a, b: ((a * b) * w).sum(),
        "exp": lambda a, b: (a.exp() * w).sum(),
        "neg": lambda a, b: ((-a) * w).sum(),
        "softmax": lambda a, b: (a.softmax(axis=1) * w).sum(),
        "transpose": lambda a, b: (a.T * w.T).sum(),
        "sum": lambda a, b: (a.sum(axis=0) * b.sum(axis=0)).sum(),
    }
    assert finite_difference_check(fns[name], [x, y]) < 1e-4
