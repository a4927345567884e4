import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threerinn import tensor as T
from threerinn.errors import ShapeError
from threerinn.gradcheck import numeric_grad, relative_error
from threerinn.tensor import Tensor


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def fd_check(build, inputs, h=1e-5, tol=1e-5):
    """Analytic vs central-difference gradients of sum-reduced ``build(*inputs)``."""
    for t in inputs:
        t.grad = None
    T.backward(build(*inputs))

    def f():
        with T.no_grad():
            return build(*inputs).item()

    for t in inputs:
        num = numeric_grad(f, t.data, h)
        analytic = np.zeros_like(num) if t.grad is None else t.grad
        err = np.abs(analytic - num).max() / max(np.abs(num).max(), 1e-8)
        assert err <= tol, f"relative gradient error {err}"


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 2, 3, 5, 4, grad=False)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = T.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_all_ones_hand_oracle(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        y = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float)
        np.testing.assert_array_equal(y.data[0, 0], expected)

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(2)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 2, 4, 5))
        for n in range(2):
            for o in range(2):
                for i in range(4):
                    for j in range(5):
                        ref[n, o, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[o]) + b[o]
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)

    def test_weight_gradient_finite_difference(self):
        rng = np.random.default_rng(2)
        x, w, b = rand(rng, 2, 3, 4, 4), rand(rng, 2, 3, 3, 3), rand(rng, 2)
        fd_check(lambda x, w, b: T.sum(T.conv2d(x, w, b)), [x, w, b], tol=1e-6)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_only_3x3(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 5))))


class TestDenseLayer:
    def test_equals_conv_of_concat(self):
        rng = np.random.default_rng(3)
        parts = [rand(rng, 2, 3, 5, 6), rand(rng, 2, 4, 5, 6)]
        w, b = rand(rng, 5, 7, 3, 3), rand(rng, 5)
        ref = T.conv2d(T.concat(parts, axis=1), w, b).data
        cols = [T.im2col3(T.transpose(p, (1, 0, 2, 3))) for p in parts]
        out = T.dense_layer(cols, w, b).data.reshape(5, 2, 5, 6).transpose(1, 0, 2, 3)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        a, c = rand(rng, 1, 2, 4, 3), rand(rng, 1, 3, 4, 3)
        w, b = rand(rng, 2, 5, 3, 3), rand(rng, 2)

        def build(a, c, w, b):
            cols = [T.im2col3(T.transpose(t, (1, 0, 2, 3))) for t in (a, c)]
            return T.sum(T.square(T.dense_layer(cols, w, b)))

        fd_check(build, [a, c, w, b])


class TestLeakyRelu:
    def test_values(self):
        y = T.leaky_relu(Tensor(np.array([1.0, -1.0, 0.0])), 0.2)
        np.testing.assert_allclose(y.data, [1.0, -0.2, 0.0])

    def test_gradient_negative_branch(self):
        x = Tensor(np.array([-3.0]), requires_grad=True, dtype=np.float64)
        fd_check(lambda x: T.sum(T.leaky_relu(x, 0.2)), [x])
        np.testing.assert_allclose(x.grad, [0.2])

    def test_subgradient_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
        T.backward(T.sum(T.leaky_relu(x, 0.2)))
        assert x.grad[0] == pytest.approx(0.2)


class TestElementwise:
    def test_split_concat_roundtrip(self):
        t = Tensor(np.arange(2 * 12 * 2 * 2, dtype=float).reshape(2, 12, 2, 2))
        parts = T.split(t, [3, 9], axis=1)
        assert [p.shape[1] for p in parts] == [3, 9]
        np.testing.assert_array_equal(T.concat(parts, axis=1).data, t.data)

    def test_exp_zero(self):
        np.testing.assert_array_equal(T.exp(Tensor(np.zeros((2, 3)))).data, np.ones((2, 3)))

    def test_mean_square_derivative(self):
        n = 5
        x = Tensor(np.full(n, 2.0), requires_grad=True, dtype=np.float64)
        T.backward(T.mean(T.square(x)))
        np.testing.assert_allclose(x.grad, np.full(n, 4.0 / n))

    def test_clamp_inside_range_is_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(0.1, 0.9, (3, 4)))
        np.testing.assert_array_equal(T.clamp(x, 0.0, 1.0).data, x.data)

    def test_division_by_zero(self):
        with pytest.raises(ZeroDivisionError):
            Tensor(np.ones(3)) / Tensor(np.array([1.0, 0.0, 2.0]))

    def test_per_channel_broadcast(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 2, 3, 2, 2)
        b = rand(rng, 1, 3, 1, 1)
        fd_check(lambda x, b: T.sum(T.square(x * b + b)), [x, b])

    def test_general_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3, 4, 4))) + Tensor(np.zeros((4, 4)))

    @pytest.mark.parametrize(
        "build",
        [
            lambda a, b: T.sum(a + b),
            lambda a, b: T.sum(a - b * b),
            lambda a, b: T.mean(a * b),
            lambda a, b: T.sum(a / (T.exp(b) + 1.0)),
            lambda a, b: T.sum(T.exp(a) * T.tanh(b)),
            lambda a, b: T.sum(T.log(T.square(a) + 1.0) + T.sigmoid(b)),
            lambda a, b: T.sum(T.abs(a) + T.sqrt(T.square(b) + 0.5)),
            lambda a, b: T.sum(T.minimum(a, b) * a),
            lambda a, b: T.sum(T.power(T.clamp(a, 0.0, 1.0) + 0.1, 2.2) * b),
            lambda a, b: T.sum(T.concat(T.split(a, [1, 2], axis=1)[::-1] + [b], axis=1) * 1.5),
            lambda a, b: T.sum(T.mean(T.square(a), axis=(1, 2, 3)) * 3.0),
            lambda a, b: T.sum(T.separable_filter_valid(a * b, np.array([0.25, 0.5, 0.25]))),
        ],
    )
    def test_gradients_match_finite_differences(self, build):
        rng = np.random.default_rng(7)
        a, b = rand(rng, 2, 3, 4, 4), rand(rng, 2, 3, 4, 4)
        fd_check(build, [a, b])

    def test_forward_bit_identical_across_runs(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 5, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 5, 3, 3)).astype(np.float32)
        runs = [T.mean(T.conv2d(Tensor(x), Tensor(w))).data.tobytes() for _ in range(3)]
        assert len(set(runs)) == 1


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_bilinear(self):
        rng = np.random.default_rng(0)
        x, y = rand(rng, 3, 4), rand(rng, 3, 4)
        T.backward(T.sum(x * y))
        np.testing.assert_array_equal(x.grad, y.data)
        np.testing.assert_array_equal(y.grad, x.data)

    def test_three_layer_dense_block(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 1, 2, 4, 4, grad=False)
        ws = [rand(rng, 3, 2, 3, 3), rand(rng, 3, 5, 3, 3), rand(rng, 2, 8, 3, 3)]
        bs = [rand(rng, 3), rand(rng, 3), rand(rng, 2)]

        def build(*params):
            w, b = params[:3], params[3:]
            feats = [x]
            for k in range(3):
                y = T.conv2d(T.concat(feats, axis=1), w[k], b[k])
                if k < 2:
                    y = T.leaky_relu(y, 0.2)
                    feats.append(y)
            return T.sum(T.square(y))

        fd_check(build, ws + bs, tol=1e-5)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(x * 2.0)

    def test_empty_tape(self):
        with pytest.raises(RuntimeError, match="empty tape"):
            T.backward(Tensor(np.ones(1), requires_grad=True))

    def test_second_backward_is_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.sum(x * 2.0)
        T.backward(loss)
        with pytest.raises(RuntimeError):
            T.backward(loss)

    def test_all_reachable_tensors_get_grads(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        mid = T.exp(x)
        loss = T.sum(mid * 3.0)
        T.backward(loss)
        assert mid.grad is not None and mid.grad.shape == mid.shape
        assert x.grad.shape == x.shape

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.sum(x * 2.0)
        assert y._node is None and not y.requires_grad


@settings(max_examples=25, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4),
    seed=st.integers(0, 2**16),
)
def test_split_concat_identity_property(sizes, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((2, sum(sizes), 3, 3)))
    np.testing.assert_array_equal(T.concat(T.split(x, sizes, axis=1), axis=1).data, x.data)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0 + 1e-6) == pytest.approx(1e-6, rel=1e-3)
