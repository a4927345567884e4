"""Quality metrics, achieved power reduction, ablation runs and energy reports."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .imaging import TrainingPair, check_image, luma, quantize8, to_batch
from .losses import PowerModelConfig, power, ssim
from .network import ThreeRINN, sample_latent
from .tensor import Tensor


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR of BT.601 luma for images in [0, 1]; identical inputs give ``inf``."""
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr_y: shapes differ, {a.shape} vs {b.shape}")
    mse = float(np.mean((luma(a.astype(np.float64)) - luma(b.astype(np.float64))) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats for two discrete distributions (normalised here)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = p / p.sum(), q / q.sum()
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def luma_histogram(img: np.ndarray, bins: int = 256) -> np.ndarray:
    y = np.clip(luma(check_image(img).astype(np.float64)), 0.0, 1.0)
    counts, _ = np.histogram(y, bins=bins, range=(0.0, 1.0))
    return counts.astype(np.float64)


def histogram_kld(a: np.ndarray, b: np.ndarray, bins: int = 256) -> float:
    """KL divergence between add-one-smoothed luma histograms of ``a`` and ``b``."""
    return kl_divergence(luma_histogram(a, bins) + 1.0, luma_histogram(b, bins) + 1.0)


def achieved_reduction(lr_pred, lr_ref, cfg: PowerModelConfig | None = None) -> float:
    ref = power(lr_ref, cfg)
    if ref == 0.0:
        raise ZeroDivisionError("reference image has zero power")
    pred = np.asarray(lr_pred)
    if pred.shape != np.asarray(lr_ref).shape:
        raise ShapeError(f"achieved_reduction: shapes differ, {pred.shape} vs {np.asarray(lr_ref).shape}")
    return 1.0 - power(lr_pred, cfg) / ref


def reductions(lr_pred, lr_ref, cfg: PowerModelConfig | None = None) -> tuple[float, float]:
    """Achieved reduction under the luminance and RGBW models."""
    base = cfg or PowerModelConfig()
    lum = PowerModelConfig("luminance", base.gamma, base.k_r, base.k_g, base.k_b, base.k_w)
    rgbw = PowerModelConfig("rgbw", base.gamma, base.k_r, base.k_g, base.k_b, base.k_w)
    return achieved_reduction(lr_pred, lr_ref, lum), achieved_reduction(lr_pred, lr_ref, rgbw)


# --- reports ------------------------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}" if isinstance(v, float) else str(v)


@dataclass
class MetricReport:
    """Per-image rows plus a ``mean`` aggregate row."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def aggregate(self) -> dict:
        agg = {self.columns[0]: "mean"}
        for col in self.columns[1:]:
            vals = [r[col] for r in self.rows]
            agg[col] = float(np.mean(vals)) if vals else math.nan
        return agg

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            for row in self.rows + [self.aggregate()]:
                w.writerow([_fmt(row[c]) for c in self.columns])


REPORT_COLUMNS = ["image", "psnr_y", "ssim", "kld", "rate_y", "rate_rgbw"]
ABLATION_COLUMNS = [
    "image",
    "lr_psnr_y",
    "lr_ssim",
    "clean_hr_psnr_y",
    "clean_hr_ssim",
    "grainy_hr_psnr_y",
    "grainy_hr_ssim",
    "grainy_hr_kld",
]


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("ThreeR_NUM_THREADS", "1")))
    except ValueError:
        return 1


def _hwc(t: Tensor) -> np.ndarray:
    return t.data[0].transpose(1, 2, 0).astype(np.float64)


def _export(img: np.ndarray, quantize: bool) -> np.ndarray:
    return quantize8(img) / 255.0 if quantize else np.clip(img, 0.0, 1.0)


def image_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _reconstruct(net: ThreeRINN, pair: TrainingPair, config_id: int, rng, quantize_lr: bool):
    with T.no_grad():
        x = Tensor(to_batch([pair.grainy_hr]).astype(net.dtype))
        res = net.forward(x)
        lr_img = _export(_hwc(res.lr), quantize_lr)
        # the float path hands the raw LR tensor to the inverse, out-of-range values included
        lr_t = Tensor(to_batch([lr_img]).astype(net.dtype)) if quantize_lr else res.lr
        sample = sample_latent(res.z.shape, rng, net.dtype)
        if config_id == 1:
            clean = net.inverse(lr_t, sample, "clean")
            grainy = net.inverse(lr_t, res.z, "true_latent")
        elif config_id == 2:
            clean = net.inverse(lr_t, sample, "clean", bypass_latent=True)
            grainy = net.inverse(lr_t, sample, "grainy", bypass_latent=True)
        elif config_id == 3:
            clean = net.inverse(lr_t, sample, "clean")
            grainy = net.inverse(lr_t, sample, "grainy")
        else:
            raise ConfigError(f"unknown ablation config id {config_id}; expected 1, 2 or 3")
    return lr_img, _export(_hwc(clean), False), _export(_hwc(grainy), False)


def evaluate_ablation(
    net: ThreeRINN,
    dataset: list[TrainingPair],
    config_id: int,
    seed: int = 0,
    quantize_lr: bool = False,
    names: list[str] | None = None,
) -> MetricReport:
    """Table-5 style evaluation of one latent configuration.

    1: clean from a sampled latent, grainy from the true forward latent;
    2: sampled latent fed straight in as ``z_tilde`` (no conditional block);
    3: sampled latent decoded through the conditional block.
    Every image draws its sample from ``(seed, index)``, so configs 2 and 3
    see identical samples.
    """
    if config_id not in (1, 2, 3):
        raise ConfigError(f"unknown ablation config id {config_id}; expected 1, 2 or 3")
    names = names or [f"img{i:04d}" for i in range(len(dataset))]

    def one(i: int) -> dict:
        pair = dataset[i]
        lr_img, clean, grainy = _reconstruct(net, pair, config_id, image_seed(seed, i), quantize_lr)
        return {
            "image": names[i],
            "lr_psnr_y": psnr_y(lr_img, pair.clean_lr),
            "lr_ssim": ssim(lr_img, pair.clean_lr),
            "clean_hr_psnr_y": psnr_y(clean, pair.clean_hr),
            "clean_hr_ssim": ssim(clean, pair.clean_hr),
            "grainy_hr_psnr_y": psnr_y(grainy, pair.grainy_hr),
            "grainy_hr_ssim": ssim(grainy, pair.grainy_hr),
            "grainy_hr_kld": histogram_kld(pair.grainy_hr, grainy),
        }

    report = MetricReport(list(ABLATION_COLUMNS))
    for row in _map(one, range(len(dataset))):
        report.add(**row)
    return report


def evaluate(
    net: ThreeRINN,
    dataset: list[TrainingPair],
    seed: int = 0,
    quantize_lr: bool = False,
    power_cfg: PowerModelConfig | None = None,
    names: list[str] | None = None,
) -> MetricReport:
    """Per-image LR fidelity (vs bicubic), grain KLD and achieved reductions."""
    names = names or [f"img{i:04d}" for i in range(len(dataset))]

    def one(i: int) -> dict:
        pair = dataset[i]
        lr_img, _, grainy = _reconstruct(net, pair, 3, image_seed(seed, i), quantize_lr)
        rate_y, rate_rgbw = reductions(lr_img, pair.clean_lr, power_cfg)
        return {
            "image": names[i],
            "psnr_y": psnr_y(lr_img, pair.clean_lr),
            "ssim": ssim(lr_img, pair.clean_lr),
            "kld": histogram_kld(pair.grainy_hr, grainy),
            "rate_y": rate_y,
            "rate_rgbw": rate_rgbw,
        }

    report = MetricReport(list(REPORT_COLUMNS))
    for row in _map(one, range(len(dataset))):
        report.add(**row)
    return report


def _map(fn, items):
    items = list(items)
    n = num_threads()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# --- energy -----------------------------------------------------------------------------
CHAIN_COLUMNS = ["variant", "qp", "encode_s", "decode_s", "bitrate_kbps", "display_w"]


@dataclass
class EnergyCoefficients:
    """Joules per unit of each measured quantity (user supplied)."""

    head_end: float = 1.0  # per encode second
    delivery: float = 1.0  # per kbps
    device: float = 1.0  # per decode second
    display: float = 1.0  # per watt


def read_chain_measurements(path) -> list[dict]:
    rows = []
    seen = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != CHAIN_COLUMNS:
            raise ConfigError(f"measurement CSV header must be {','.join(CHAIN_COLUMNS)}", 1)
        for lineno, raw in enumerate(reader, start=2):
            try:
                row = {
                    "variant": raw["variant"].strip(),
                    "qp": raw["qp"].strip(),
                    **{c: float(raw[c]) for c in CHAIN_COLUMNS[2:]},
                }
            except (TypeError, ValueError):
                raise ConfigError("non-numeric measurement", lineno) from None
            if any(row[c] < 0 for c in CHAIN_COLUMNS[2:]):
                raise ConfigError("measurements must be nonnegative", lineno)
            key = (row["variant"], row["qp"])
            if key in seen:
                raise ConfigError(f"duplicate variant/qp {key}", lineno)
            seen.add(key)
            rows.append(row)
    return rows


ENERGY_COLUMNS = [
    "variant",
    "qp",
    "encode_j",
    "delivery_j",
    "decode_j",
    "display_j",
    "encode_saving_pct",
    "delivery_saving_pct",
    "decode_saving_pct",
    "display_saving_pct",
    "total_saving_pct",
]


def _saving(value: float, base: float) -> float:
    if base == 0.0:
        return 0.0 if value == 0.0 else -math.inf
    return 100.0 * (1.0 - value / base)


def energy_savings_report(measurements: list[dict], baseline_variant: str, coeffs: EnergyCoefficients) -> list[dict]:
    """Per-row stage energies and percentage savings against the baseline at the same QP."""
    base = {r["qp"]: r for r in measurements if r["variant"] == baseline_variant}
    if not base:
        raise ConfigError(f"baseline variant {baseline_variant!r} not in measurements")
    out = []
    for r in measurements:
        if r["qp"] not in base:
            raise ConfigError(f"no baseline row for qp {r['qp']}")
        b = base[r["qp"]]

        def energies(m):
            return (
                m["encode_s"] * coeffs.head_end,
                m["bitrate_kbps"] * coeffs.delivery,
                m["decode_s"] * coeffs.device,
                m["display_w"] * coeffs.display,
            )

        e, eb = energies(r), energies(b)
        row = {"variant": r["variant"], "qp": r["qp"]}
        for name, v in zip(("encode_j", "delivery_j", "decode_j", "display_j"), e):
            row[name] = v
        for name, v, vb in zip(
            ("encode_saving_pct", "delivery_saving_pct", "decode_saving_pct", "display_saving_pct"), e, eb
        ):
            row[name] = _saving(v, vb)
        row["total_saving_pct"] = _saving(sum(e), sum(eb))
        out.append(row)
    return out


def write_energy_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ENERGY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in ENERGY_COLUMNS])
