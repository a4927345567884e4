import math

import numpy as np
import pytest

from threerinn import tensor as T
from threerinn.errors import NonFiniteError, ShapeError
from threerinn.losses import (
    LossWeights,
    PowerModelConfig,
    gaussian_window,
    linear_scale,
    loss_back,
    loss_forward,
    loss_power,
    loss_reg,
    loss_ssim,
    power,
    ssim,
    total_loss_stage1,
    total_loss_stage2,
)
from threerinn.tensor import Tensor

LUM = PowerModelConfig("luminance")
RGBW = PowerModelConfig("rgbw")


def img(rng, h=16, w=16, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, (h, w, 3))


def nchw(a):
    return Tensor(np.asarray(a)[None].transpose(0, 3, 1, 2), dtype=np.float64)


class TestForward:
    def test_identical(self):
        x = np.random.default_rng(0).random((2, 3, 4, 4))
        assert loss_forward(x, x).item() == 0.0

    def test_unit_offset(self):
        x = np.random.default_rng(0).random((2, 3, 4, 4))
        assert loss_forward(x + 1, x).item() == pytest.approx(1.0, abs=1e-6)

    def test_duplicated_batch(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
        dup = loss_forward(np.concatenate([a, a]), np.concatenate([b, b])).item()
        assert dup == pytest.approx(loss_forward(a, b).item(), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_forward(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 2)))

    def test_gradient_finite_at_zero_residual(self):
        x = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        T.backward(loss_forward(x, np.ones((1, 3, 2, 2))))
        assert np.all(np.isfinite(x.grad))


class TestReg:
    def test_zero(self):
        assert loss_reg(np.zeros((1, 9, 2, 2))).item() == 0.0

    def test_ones(self):
        assert loss_reg(np.ones((1, 9, 2, 2))).item() == pytest.approx(0.5)

    def test_monte_carlo_expectation(self):
        z = np.random.default_rng(0).standard_normal(1_000_000)
        assert loss_reg(Tensor(z, dtype=np.float64)).item() == pytest.approx(0.5, rel=0.01)


class TestBack:
    def test_identical(self):
        x = np.random.default_rng(0).random((1, 3, 4, 4))
        assert loss_back(x, x).item() == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(0).random((1, 3, 4, 4))
        assert loss_back(x + 0.1, x).item() == pytest.approx(0.1, abs=1e-6)

    def test_channel_permutation(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((1, 3, 4, 4)), rng.random((1, 3, 4, 4))
        perm = [2, 0, 1]
        assert loss_back(a[:, perm], b[:, perm]).item() == pytest.approx(loss_back(a, b).item(), rel=1e-6)


class TestPower:
    def test_black(self):
        z = np.zeros((4, 4, 3))
        assert power(z, LUM) == 0.0 and power(z, RGBW) == 0.0

    def test_white(self):
        o = np.ones((4, 4, 3))
        assert power(o, LUM) == pytest.approx(1.0, abs=1e-12)
        assert power(o, PowerModelConfig("rgbw", k_r=0.3, k_g=0.2, k_b=0.4, k_w=0.5)) == pytest.approx(1.0)

    def test_pure_red(self):
        red = np.zeros((2, 2, 3))
        red[..., 0] = 1.0
        assert power(red, LUM) == pytest.approx(0.2126)
        cfg = PowerModelConfig("rgbw", k_r=0.3, k_g=0.2, k_b=0.4, k_w=0.5)
        assert power(red, cfg) == pytest.approx(cfg.normalized[0]) == pytest.approx(0.6)

    def test_rgbw_white_extraction(self):
        px = np.array([[[0.8, 0.5, 0.3]]])
        lin = px[0, 0] ** 2.2
        w = lin.min()
        kr, kg, kb, kw = RGBW.normalized
        expected = kr * (lin[0] - w) + kg * (lin[1] - w) + kb * (lin[2] - w) + kw * w
        assert power(px, RGBW) == pytest.approx(expected, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            power(np.full((2, 2, 3), 1.1), LUM)
        power(np.full((2, 2, 3), 1.0 + 5e-7), LUM)

    def test_bad_model(self):
        with pytest.raises(ValueError):
            PowerModelConfig("plasma")


class TestLossPower:
    def test_same_image_r0(self):
        x = img(np.random.default_rng(0))
        assert loss_power(nchw(x), nchw(x), 0.0, RGBW).item() == 0.0

    def test_r1_equals_power(self):
        rng = np.random.default_rng(1)
        a, b = img(rng), img(rng)
        assert loss_power(nchw(a), nchw(b), 1.0, LUM).item() == pytest.approx(power(a, LUM), rel=1e-12)

    @pytest.mark.parametrize("R", [0.1, 0.2, 0.4, 0.7])
    def test_linear_scaling_oracle(self, R):
        ref = img(np.random.default_rng(2))
        pred = linear_scale(ref, R)
        assert abs(loss_power(nchw(pred), nchw(ref), R, LUM).item()) <= 1e-6

    def test_gradient_flows_to_prediction_only(self):
        rng = np.random.default_rng(3)
        pred = Tensor(img(rng, 8, 8, 0.2, 0.8)[None].transpose(0, 3, 1, 2), requires_grad=True, dtype=np.float64)
        ref = Tensor(img(rng, 8, 8)[None].transpose(0, 3, 1, 2), requires_grad=True, dtype=np.float64)
        T.backward(loss_power(pred, ref, 0.3, RGBW))
        assert pred.grad is not None and ref.grad is None


def _ssim_direct(a, b):
    """Windowed statistics evaluated by explicit loops over every valid window."""
    k = gaussian_window()
    w2 = np.outer(k, k)
    n = 11
    vals = []
    for c in range(3):
        for i in range(a.shape[0] - n + 1):
            for j in range(a.shape[1] - n + 1):
                pa, pb = a[i : i + n, j : j + n, c], b[i : i + n, j : j + n, c]
                ma, mb = np.sum(w2 * pa), np.sum(w2 * pb)
                va = np.sum(w2 * (pa - ma) ** 2)
                vb = np.sum(w2 * (pb - mb) ** 2)
                cov = np.sum(w2 * (pa - ma) * (pb - mb))
                c1, c2 = 0.01**2, 0.03**2
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_self_is_one(self):
        x = img(np.random.default_rng(0))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
        assert loss_ssim(nchw(x), nchw(x)).item() == pytest.approx(0.0, abs=1e-12)

    def test_anticorrelated_negative(self):
        x = np.zeros((16, 16, 3))
        x[:, 8:] = 1.0
        assert ssim(x, 1.0 - x) < 0

    def test_offset_matches_direct_oracle(self):
        x = img(np.random.default_rng(1), 16, 16, 0.0, 0.9)
        assert ssim(x, x + 0.1) == pytest.approx(_ssim_direct(x, x + 0.1), abs=1e-6)

    def test_random_pair_matches_direct_oracle(self):
        rng = np.random.default_rng(2)
        a, b = img(rng, 13, 15), img(rng, 13, 15)
        assert ssim(a, b) == pytest.approx(_ssim_direct(a, b), abs=1e-9)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 16, 3)), np.zeros((8, 16, 3)))


class TestTotals:
    def parts(self, v=1.0):
        keys = ["loss_forw", "loss_reg", "loss_back_c", "loss_back_g", "loss_power", "loss_ssim"]
        return {k: Tensor(np.array(v)) for k in keys}

    def test_stage1_all_ones(self):
        assert total_loss_stage1(self.parts(), LossWeights()).item() == pytest.approx(43.0)

    def test_stage2_reduces_without_energy_terms(self):
        w = LossWeights(lambda5=0.0, lambda6=0.0)
        assert total_loss_stage2(self.parts(0.7), w).item() == total_loss_stage1(self.parts(0.7), w).item()

    def test_nan_power_named(self):
        parts = self.parts()
        parts["loss_power"] = Tensor(np.array(math.nan))
        with pytest.raises(NonFiniteError, match="loss_power non-finite"):
            total_loss_stage2(parts, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda3=-1.0)
