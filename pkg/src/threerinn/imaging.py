"""Image I/O, bicubic ground truth, synthetic film grain and training crops.

Images are float arrays of shape ``(H, W, 3)`` holding display-referred RGB
in ``[0, 1]``.  Batches handed to the network are ``(B, 3, H, W)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import png
from scipy import ndimage, signal

from .config import ConfigError, dump, populate, read_kv
from .errors import FormatError, ShapeError

LUMA_601 = np.array([0.299, 0.587, 0.114])


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an ``(..., 3)`` array, channel-last."""
    return img[..., 0] * LUMA_601[0] + img[..., 1] * LUMA_601[1] + img[..., 2] * LUMA_601[2]


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {img.shape}")
    return img


def to_batch(images) -> np.ndarray:
    """Stack ``(H, W, 3)`` images into an NCHW float32 batch."""
    return np.stack([check_image(im).transpose(2, 0, 1) for im in images]).astype(np.float32)


def from_batch(batch: np.ndarray) -> list[np.ndarray]:
    return [b.transpose(1, 2, 0) for b in np.asarray(batch)]


# --- PNG ---------------------------------------------------------------------
def load_png(path) -> np.ndarray:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    except (OSError, png.Error) as exc:
        raise FormatError(f"cannot read PNG {path}: {exc}") from exc
    if info.get("greyscale") or info.get("alpha") or info.get("planes") != 3:
        raise FormatError("unsupported color type")
    maxval = float(2 ** info["bitdepth"] - 1)
    return (data.reshape(height, width, 3) / maxval).astype(np.float32)


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round half away from zero to 8-bit codes after clipping to [0, 1]."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    img = check_image(img)
    h, w, _ = img.shape
    codes = quantize8(img).reshape(h, w * 3)
    with open(path, "wb") as f:
        png.Writer(width=w, height=h, greyscale=False, bitdepth=8).write(f, codes)


# --- bicubic -------------------------------------------------------------------
def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def downscale_matrix(n: int, a: float = -0.5) -> np.ndarray:
    """``(n/2, n)`` resampling matrix for an antialiased 2x bicubic reduction.

    The kernel is stretched by the scale factor (8 taps), sample centres sit
    at ``2i + 0.5`` in input pixels, out-of-range taps clamp to the edge, and
    each row is normalised to sum to one.
    """
    m = np.zeros((n // 2, n))
    for i in range(n // 2):
        centre = 2 * i + 0.5
        taps = np.arange(int(np.floor(centre - 4)) + 1, int(np.ceil(centre + 4)))
        wts = cubic_kernel((centre - taps) / 2.0, a) / 2.0
        wts /= wts.sum()
        for k, wk in zip(np.clip(taps, 0, n - 1), wts):
            m[i, k] += wk
    return m


def bicubic_downscale_x2(img: np.ndarray) -> np.ndarray:
    img = check_image(img)
    h, w, _ = img.shape
    if h % 2 or w % 2:
        raise ShapeError(f"bicubic_downscale_x2 needs even dimensions, got {h}x{w}")
    mh, mw = downscale_matrix(h), downscale_matrix(w)
    out = np.einsum("ij,jkc,lk->ilc", mh, img.astype(np.float64), mw)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


# --- film grain ------------------------------------------------------------------
def ar_offsets(lag: int) -> list[tuple[int, int]]:
    """Causal neighbour offsets ``(dy, dx)`` in raster order for an AR lag."""
    offs = []
    for dy in range(-lag, 1):
        for dx in range(-lag, lag + 1):
            if dy == 0 and dx >= 0:
                break
            offs.append((dy, dx))
    return offs


def lag_for(n_coeffs: int) -> int:
    lag = 0
    while 2 * lag * (lag + 1) < n_coeffs:
        lag += 1
    if 2 * lag * (lag + 1) != n_coeffs:
        raise ValueError(f"{n_coeffs} AR coefficients do not match any lag (expected 2L(L+1))")
    return lag


@dataclass
class GrainConfig:
    """Autoregressive grain pattern plus a luminance-indexed strength table."""

    ar_coefficients: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.05, 0.2])
    intensity_scale: list[float] = field(default_factory=lambda: [0.03, 0.05, 0.05, 0.03])
    seed: int = 0

    def __post_init__(self):
        self.ar_coefficients = [float(c) for c in self.ar_coefficients]
        self.intensity_scale = [float(v) for v in self.intensity_scale]
        if not self.intensity_scale:
            raise ValueError("intensity_scale needs at least one entry")
        if any(v < 0 for v in self.intensity_scale):
            raise ValueError("intensity_scale values must be >= 0")
        lag_for(len(self.ar_coefficients))

    @property
    def lag(self) -> int:
        return lag_for(len(self.ar_coefficients))

    def is_stable(self) -> bool:
        # sum |a| < 1 bounds the recursion's gain (sufficient for 2-D causal AR)
        return float(np.sum(np.abs(self.ar_coefficients))) < 1.0


def read_grain_config(path) -> GrainConfig:
    return populate(GrainConfig, read_kv(path), strict=True)


def write_grain_config(cfg: GrainConfig, path) -> None:
    Path(path).write_text(dump(cfg))


def ar_field(shape: tuple[int, int], coefficients, rng: np.random.Generator, warmup: int = 16) -> np.ndarray:
    """Unit white Gaussian noise filtered by the causal 2-D AR recursion.

    ``g[y, x] = n[y, x] + sum_k a_k g[y+dy_k, x+dx_k]``.  A ``warmup`` border
    is generated and discarded so the returned field is near-stationary.
    """
    coefficients = np.asarray(coefficients, dtype=np.float64)
    lag = lag_for(coefficients.size)
    offs = ar_offsets(lag)
    h, w = shape
    hh, ww = h + warmup, w + 2 * warmup
    noise = rng.standard_normal((hh, ww))
    g = np.zeros((hh + lag, ww + 2 * lag))  # zero margin for out-of-range taps
    row_taps = [(dx, a) for (dy, dx), a in zip(offs, coefficients) if dy == 0]
    prev_taps = [(dy, dx, a) for (dy, dx), a in zip(offs, coefficients) if dy < 0 and a != 0]
    denom = np.zeros(lag + 1)
    denom[0] = 1.0
    for dx, a in row_taps:
        denom[-dx] = -a
    for y in range(hh):
        gy = y + lag
        drive = noise[y].copy()
        for dy, dx, a in prev_taps:
            drive += a * g[gy + dy, lag + dx : lag + dx + ww]
        g[gy, lag : lag + ww] = signal.lfilter([1.0], denom, drive)
    return g[lag + warmup :, lag + warmup : lag + warmup + w]


def synthesize_grain(clean: np.ndarray, cfg: GrainConfig) -> np.ndarray:
    clean = check_image(clean)
    if not cfg.is_stable():
        raise ValueError("unstable AR coefficients (sum of |a| must be < 1)")
    rng = np.random.default_rng(cfg.seed)
    h, w, _ = clean.shape
    g = ar_field((h, w), cfg.ar_coefficients, rng)
    table = np.asarray(cfg.intensity_scale, dtype=np.float64)
    y = luma(clean.astype(np.float64))
    strength = np.interp(y, np.linspace(0.0, 1.0, table.size), table) if table.size > 1 else np.full_like(y, table[0])
    grainy = clean + (strength * g)[..., None]
    return np.clip(grainy, 0.0, 1.0).astype(clean.dtype)


GRAIN_PRESETS = {
    "light": GrainConfig([0.05, 0.1, 0.05, 0.2], [0.02, 0.03, 0.03, 0.02]),
    "medium": GrainConfig([0.05, 0.1, 0.05, 0.2], [0.03, 0.05, 0.05, 0.03]),
    "heavy": GrainConfig([0.1, 0.15, 0.1, 0.3], [0.04, 0.07, 0.07, 0.04]),
}


# --- pairs and augmentation ---------------------------------------------------------
@dataclass
class TrainingPair:
    grainy_hr: np.ndarray
    clean_hr: np.ndarray
    clean_lr: np.ndarray

    def __post_init__(self):
        gh, ch, cl = (check_image(x) for x in (self.grainy_hr, self.clean_hr, self.clean_lr))
        if gh.shape != ch.shape:
            raise ShapeError(f"grainy {gh.shape} and clean {ch.shape} HR images differ")
        if cl.shape != (ch.shape[0] // 2, ch.shape[1] // 2, 3) or ch.shape[0] % 2 or ch.shape[1] % 2:
            raise ShapeError(f"clean LR {cl.shape} is not half of HR {ch.shape}")


def make_pair(clean_hr: np.ndarray, grainy_hr: np.ndarray) -> TrainingPair:
    return TrainingPair(grainy_hr, clean_hr, bicubic_downscale_x2(clean_hr))


def flip_pair(pair: TrainingPair, horizontal: bool, vertical: bool) -> TrainingPair:
    def f(x):
        if horizontal:
            x = x[:, ::-1]
        if vertical:
            x = x[::-1]
        return np.ascontiguousarray(x)

    return TrainingPair(f(pair.grainy_hr), f(pair.clean_hr), f(pair.clean_lr))


def random_crop_flip(pair: TrainingPair, size: int = 144, seed=None) -> TrainingPair:
    """Crop the same window from both HR images and apply the same random flips."""
    if size % 2:
        raise ShapeError(f"crop size must be even, got {size}")
    h, w, _ = pair.clean_hr.shape
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} smaller than crop size {size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    hflip, vflip = bool(rng.integers(2)), bool(rng.integers(2))
    win = (slice(top, top + size), slice(left, left + size))
    grainy = pair.grainy_hr[win]
    clean = pair.clean_hr[win]
    if hflip:
        grainy, clean = grainy[:, ::-1], clean[:, ::-1]
    if vflip:
        grainy, clean = grainy[::-1], clean[::-1]
    clean = np.ascontiguousarray(clean)
    return TrainingPair(np.ascontiguousarray(grainy), clean, bicubic_downscale_x2(clean))


# --- procedural corpus ----------------------------------------------------------
TEXTURE_KINDS = ("gradient", "waves", "checker", "blobs", "mix")


def procedural_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministic synthetic clean image of the given kind."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.85, size=3)
    if kind == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        t = np.cos(ang) * xx + np.sin(ang) * yy
        img = base + np.outer(t.ravel(), rng.uniform(-0.5, 0.5, 3)).reshape(size, size, 3)
    elif kind == "waves":
        img = np.empty((size, size, 3))
        for c in range(3):
            fx, fy = rng.uniform(1, 8, 2)
            img[..., c] = base[c] + 0.3 * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 6))
    elif kind == "checker":
        n = int(rng.integers(3, 9))
        cells = ((np.floor(xx * n) + np.floor(yy * n)) % 2)[..., None]
        other = rng.uniform(0.15, 0.85, size=3)
        img = cells * base + (1 - cells) * other
        img = ndimage.gaussian_filter(img, sigma=(0.7, 0.7, 0))
    elif kind == "blobs":
        img = np.empty((size, size, 3))
        for c in range(3):
            f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
            img[..., c] = base[c] + 0.25 * f / (f.std() + 1e-12)
    elif kind == "mix":
        parts = [procedural_image(k, size, rng) for k in ("gradient", "waves", "blobs")]
        wts = rng.dirichlet(np.ones(3))
        img = sum(wt * p for wt, p in zip(wts, parts))
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_pairs(n: int, size: int, seed: int = 0, preset: str | GrainConfig = "medium") -> list[TrainingPair]:
    """``n`` procedural clean images with synthetic grain, cycling texture kinds."""
    rng = np.random.default_rng(seed)
    base_cfg = GRAIN_PRESETS[preset] if isinstance(preset, str) else preset
    pairs = []
    for i in range(n):
        clean = procedural_image(TEXTURE_KINDS[i % len(TEXTURE_KINDS)], size, rng)
        cfg = dataclasses.replace(base_cfg, seed=int(rng.integers(2**31)))
        pairs.append(make_pair(clean, synthesize_grain(clean, cfg)))
    return pairs


# --- manifests ----------------------------------------------------------------------
def write_manifest(entries, path) -> None:
    """Lines of ``clean_path<TAB>grainy_path<TAB>split``."""
    with open(path, "w") as f:
        for clean, grainy, split in entries:
            f.write(f"{clean}\t{grainy}\t{split}\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    root = Path(path).parent
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError("manifest lines need clean_path, grainy_path and split", lineno)
        clean, grainy, split = parts
        out.append((str(root / clean), str(root / grainy), split.strip()))
    return out


def load_pairs(manifest, split: str | None = None) -> list[TrainingPair]:
    pairs = []
    for clean, grainy, s in read_manifest(manifest):
        if split is None or s == split:
            pairs.append(make_pair(load_png(clean), load_png(grainy)))
    return pairs
