"""Training objectives, display power models and a differentiable SSIM.

All loss functions take NCHW tensors and return single-element tensors so
they can be summed and differentiated.  Normalisations are per element so
the loss weights do not depend on crop size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NonFiniteError, ShapeError
from .tensor import Tensor

LUMA_709 = (0.2126, 0.7152, 0.0722)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lambda1: float = 40.0  # forward fidelity
    lambda2: float = 1.0  # latent regularisation
    lambda3: float = 1.0  # clean reconstruction
    lambda4: float = 1.0  # grainy reconstruction
    lambda5: float = 1e10  # power
    lambda6: float = 1e4  # SSIM
    R: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.R <= 1.0:
            raise ValueError(f"R must lie in [0, 1], got {self.R}")


@dataclass
class PowerModelConfig:
    """Which display power model to use and its parameters.

    RGBW coefficients are rescaled so that a full-white pixel costs 1, the
    same unit as the luminance model.
    """

    model: str = "rgbw"
    gamma: float = 2.2
    k_r: float = 0.25
    k_g: float = 0.25
    k_b: float = 0.25
    k_w: float = 0.25

    def __post_init__(self):
        if self.model not in ("luminance", "rgbw"):
            raise ValueError(f"power model must be 'luminance' or 'rgbw', got {self.model!r}")
        if min(self.k_r, self.k_g, self.k_b, self.k_w) < 0 or self.k_w <= 0:
            raise ValueError("RGBW coefficients must be nonnegative with k_w > 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def normalized(self) -> tuple[float, float, float, float]:
        k = self.k_w
        return self.k_r / k, self.k_g / k, self.k_b / k, 1.0


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


# --- fidelity and regularisation ----------------------------------------------------
def loss_forward(lr_pred, lr_gt) -> Tensor:
    """Batch mean of per-sample RMS differences (L2 norm over sqrt(element count))."""
    lr_pred = _t(lr_pred)
    lr_gt = _t(lr_gt, lr_pred)
    _same_shape(lr_pred, lr_gt, "loss_forward")
    per_sample = T.mean(T.square(lr_pred - lr_gt), axis=tuple(range(1, lr_pred.ndim)))
    return T.mean(T.sqrt(per_sample))


def loss_reg(z) -> Tensor:
    """Negative standard-normal log density per element, constant dropped."""
    z = _t(z)
    return T.mean(T.square(z)) * 0.5


def loss_back(reconstructed, target) -> Tensor:
    reconstructed = _t(reconstructed)
    target = _t(target, reconstructed)
    _same_shape(reconstructed, target, "loss_back")
    return T.mean(T.abs(reconstructed - target))


loss_back_grainy = loss_back
loss_back_clean = loss_back


# --- power ------------------------------------------------------------------------------
def power_tensor(img: Tensor, cfg: PowerModelConfig) -> Tensor:
    """Mean per-pixel power of an NCHW tensor (values clipped into [0, 1] first)."""
    lin = T.power(T.clamp(img, 0.0, 1.0), cfg.gamma)
    r, g, b = T.split(lin, [1, 1, 1], axis=1)
    if cfg.model == "luminance":
        p = r * LUMA_709[0] + g * LUMA_709[1] + b * LUMA_709[2]
    else:
        kr, kg, kb, kw = cfg.normalized
        white = T.minimum(T.minimum(r, g), b)
        p = (r - white) * kr + (g - white) * kg + (b - white) * kb + white * kw
    return T.mean(p)


def _as_nchw(img) -> np.ndarray:
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected an (H, W, 3) image or (B, 3, H, W) batch, got {arr.shape}")
    return arr


def power(img, cfg: PowerModelConfig | None = None) -> float:
    """Mean per-pixel display power of an image with values in [0, 1]."""
    cfg = cfg or PowerModelConfig()
    arr = _as_nchw(img)
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError("power model input outside [0, 1]")
    with T.no_grad():
        return power_tensor(Tensor(arr), cfg).item()


def loss_power(lr_pred, lr_ref, R: float, cfg: PowerModelConfig) -> Tensor:
    lr_pred = _t(lr_pred)
    lr_ref = _t(lr_ref, lr_pred)
    if not 0.0 <= R <= 1.0:
        raise ValueError(f"R must lie in [0, 1], got {R}")
    with T.no_grad():
        target = power_tensor(lr_ref.detach(), cfg).item() * (1.0 - R)
    return T.abs(power_tensor(lr_pred, cfg) - target)


def linear_scale(img: np.ndarray, R: float, gamma: float = 2.2) -> np.ndarray:
    """Luminance-scaling baseline: multiply the linear-light image by ``1 - R``."""
    img = np.asarray(img, dtype=np.float64)
    return (np.clip(img, 0, 1) ** gamma * (1.0 - R)) ** (1.0 / gamma)


# --- SSIM -----------------------------------------------------------------------------
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def ssim_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Mean single-scale SSIM over channels of two NCHW tensors in [0, 1]."""
    _same_shape(a, b, "ssim")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    k = gaussian_window()
    f = lambda x: T.separable_filter_valid(x, k)  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = f(a * a) - mu_aa
    var_b = f(b * b) - mu_bb
    cov = f(a * b) - mu_ab
    num = (mu_ab * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return T.mean(num / den)


def ssim(a, b) -> float:
    a64, b64 = _as_nchw(a), _as_nchw(b)
    if a64.shape != b64.shape:
        raise ShapeError(f"ssim: shapes differ, {a64.shape} vs {b64.shape}")
    with T.no_grad():
        return ssim_tensor(Tensor(a64), Tensor(b64)).item()


def loss_ssim(lr_pred, lr_ref) -> Tensor:
    lr_pred = _t(lr_pred)
    return 1.0 - ssim_tensor(lr_pred, _t(lr_ref, lr_pred))


# --- totals --------------------------------------------------------------------------------
STAGE1_TERMS = (("loss_forw", "lambda1"), ("loss_reg", "lambda2"), ("loss_back_c", "lambda3"), ("loss_back_g", "lambda4"))
STAGE2_TERMS = STAGE1_TERMS + (("loss_power", "lambda5"), ("loss_ssim", "lambda6"))


def _weighted(parts: dict, w: LossWeights, terms):
    total = None
    for key, lam in terms:
        value = parts[key]
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteError(f"{key} non-finite")
        term = value * getattr(w, lam)
        total = term if total is None else total + term
    return total


def total_loss_stage1(parts: dict, w: LossWeights):
    return _weighted(parts, w, STAGE1_TERMS)


def total_loss_stage2(parts: dict, w: LossWeights):
    return _weighted(parts, w, STAGE2_TERMS)
