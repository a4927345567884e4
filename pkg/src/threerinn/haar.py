"""One-level orthonormal 2-D Haar transform (analysis and synthesis).

For every 2x2 block ``a b / c d`` the four coefficients are

    low = (a+b+c+d)/2    horizontal = (a-b+c-d)/2
    vertical = (a+b-c-d)/2    diagonal = (a-b-c+d)/2

so both directions are L2 isometries and the transform is its own adjoint's
inverse.  The high band is laid out channel-major:
``[R_h, R_v, R_d, G_h, G_v, G_d, B_h, B_v, B_d]``.  This ordering is part of
the checkpoint contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, record, split


@dataclass
class SubbandTensor:
    low: Tensor  # (B, C, H/2, W/2)
    high: Tensor  # (B, 3C, H/2, W/2)


def analysis(x: np.ndarray) -> np.ndarray:
    """Haar analysis of an NCHW array into ``(B, 4C, H/2, W/2)`` = [low | high]."""
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW array, got shape {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"Haar transform needs even height and width, got {h}x{w}")
    a = x[:, :, 0::2, 0::2]
    bb = x[:, :, 0::2, 1::2]
    cc = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    half = x.dtype.type(0.5)
    low = (a + bb + cc + d) * half
    hor = (a - bb + cc - d) * half
    ver = (a + bb - cc - d) * half
    diag = (a - bb - cc + d) * half
    high = np.stack([hor, ver, diag], axis=2).reshape(b, 3 * c, h // 2, w // 2)
    return np.concatenate([low, high], axis=1)


def synthesis(coeffs: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`analysis`."""
    b, c4, h, w = coeffs.shape
    if c4 % 4:
        raise ShapeError(f"sub-band channel count {c4} is not a multiple of 4")
    c = c4 // 4
    low = coeffs[:, :c]
    high = coeffs[:, c:].reshape(b, c, 3, h, w)
    hor, ver, diag = high[:, :, 0], high[:, :, 1], high[:, :, 2]
    half = coeffs.dtype.type(0.5)
    out = np.empty((b, c, 2 * h, 2 * w), dtype=coeffs.dtype)
    out[:, :, 0::2, 0::2] = (low + hor + ver + diag) * half
    out[:, :, 0::2, 1::2] = (low - hor + ver - diag) * half
    out[:, :, 1::2, 0::2] = (low + hor - ver - diag) * half
    out[:, :, 1::2, 1::2] = (low - hor - ver + diag) * half
    return out


def haar_forward(img: Tensor) -> SubbandTensor:
    if img.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"haar_forward expects (B, 3, H, W), got {img.shape}")
    # orthonormal: the adjoint of analysis is synthesis
    coeffs = record(analysis(img.data), (img,), lambda g: (synthesis(g),))
    low, high = split(coeffs, [3, 9], axis=1)
    return SubbandTensor(low, high)


def haar_inverse(sb: SubbandTensor) -> Tensor:
    low, high = sb.low, sb.high
    if low.ndim != 4 or high.ndim != 4 or low.shape[1] != 3 or high.shape[1] != 9:
        raise ShapeError(
            f"haar_inverse expects 3 low and 9 high channels, got {low.shape} and {high.shape}"
        )
    if low.shape[0] != high.shape[0] or low.shape[2:] != high.shape[2:]:
        raise ShapeError(f"sub-band extents differ: {low.shape} vs {high.shape}")
    coeffs = np.concatenate([low.data, high.data], axis=1)

    def bw(g):
        a = analysis(g)
        return a[:, :3], a[:, 3:]

    return record(synthesis(coeffs), (low, high), bw)


def average_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 mean of an NCHW array, summed in the same order as the Haar low band."""
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return (a + b + c + d) * x.dtype.type(0.25)
