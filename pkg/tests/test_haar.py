import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threerinn import tensor as T
from threerinn.errors import ShapeError
from threerinn.haar import SubbandTensor, analysis, average_pool2, haar_forward, haar_inverse, synthesis
from threerinn.tensor import Tensor


def test_constant_image():
    c = 0.3
    sb = haar_forward(Tensor(np.full((1, 3, 4, 6), c)))
    np.testing.assert_allclose(sb.low.data, 2 * c, rtol=0, atol=1e-15)
    assert not np.any(sb.high.data)


def test_single_block_oracle():
    # rows of the 4x4 orthonormal Haar matrix all have magnitude 1/2
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 0, 0] = 1.0
    np.testing.assert_allclose(analysis(x).ravel(), [0.5, 0.5, 0.5, 0.5])


def test_matches_matrix_oracle():
    H = 0.5 * np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)
    np.testing.assert_allclose(H @ H.T, np.eye(4))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 2, 2))
    abcd = np.array([x[0, 0, 0, 0], x[0, 0, 0, 1], x[0, 0, 1, 0], x[0, 0, 1, 1]])
    np.testing.assert_allclose(analysis(x).ravel(), H @ abcd, atol=1e-15)


def test_subband_layout_channel_major():
    x = np.zeros((1, 3, 2, 2))
    x[0, 1] = [[1, -1], [1, -1]]  # pure horizontal detail in G
    coeffs = analysis(x)
    nz = np.flatnonzero(np.abs(coeffs[0, :, 0, 0]) > 0)
    assert list(nz) == [3 + 3]  # high channel index 3 = G_h


def test_energy_preserved():
    x = np.random.default_rng(1).standard_normal((2, 3, 8, 10))
    assert np.linalg.norm(analysis(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)


def test_inverse_of_constant_low():
    c = 0.7
    low = Tensor(np.full((1, 3, 2, 2), 2 * c))
    out = haar_inverse(SubbandTensor(low, Tensor(np.zeros((1, 9, 2, 2)))))
    np.testing.assert_allclose(out.data, c)


def test_two_sided_inverse():
    rng = np.random.default_rng(2)
    sb = SubbandTensor(Tensor(rng.standard_normal((2, 3, 3, 4))), Tensor(rng.standard_normal((2, 9, 3, 4))))
    back = haar_forward(haar_inverse(sb))
    np.testing.assert_allclose(back.low.data, sb.low.data, atol=1e-6)
    np.testing.assert_allclose(back.high.data, sb.high.data, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_round_trip_property(h, w, seed):
    x = np.random.default_rng(seed).random((1, 3, 2 * h, 2 * w)).astype(np.float32)
    assert np.abs(synthesis(analysis(x)) - x).max() <= 1e-6


def test_low_band_half_is_average_pool_bitwise():
    x = np.random.default_rng(3).random((2, 3, 8, 8)).astype(np.float32)
    low = analysis(x)[:, :3] * np.float32(0.5)
    assert np.array_equal(low, average_pool2(x))


def test_odd_dimensions_rejected():
    with pytest.raises(ShapeError):
        haar_forward(Tensor(np.zeros((1, 3, 5, 4))))


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError):
        haar_inverse(SubbandTensor(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 8, 2, 2)))))


def test_gradients_are_adjoint():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True, dtype=np.float64)
    wl, wh = rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((1, 9, 2, 2))
    sb = haar_forward(x)
    T.backward(T.sum(sb.low * Tensor(wl)) + T.sum(sb.high * Tensor(wh)))
    np.testing.assert_allclose(x.grad, synthesis(np.concatenate([wl, wh], axis=1)), atol=1e-12)
