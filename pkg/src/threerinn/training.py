"""Two-stage optimisation: rescaling + grain (stage 1), then power fine-tuning (stage 2)."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NonFiniteError
from .imaging import TrainingPair, random_crop_flip, to_batch
from .losses import (
    LossWeights,
    PowerModelConfig,
    loss_back,
    loss_forward,
    loss_power,
    loss_reg,
    loss_ssim,
    total_loss_stage1,
    total_loss_stage2,
)
from .network import ThreeRINN, sample_latent
from .tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "iter",
    "loss_total",
    "loss_forw",
    "loss_reg",
    "loss_back_c",
    "loss_back_g",
    "loss_pow",
    "loss_ssim",
    "lr",
]


@dataclass
class TrainingConfig:
    batch_size: int = 16
    crop: int = 144
    stage1_iters: int = 2000
    stage2_iters: int = 200
    lr0: float = 2e-4
    stage2_lr: float = 1e-4
    # empty -> 20/40/60/80 % of stage1_iters (the 100k..400k of 500k schedule)
    lr_milestones: list[int] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    # linear ramp from lr0/warmup_iters to lr0; 0 keeps the plain step schedule
    warmup_iters: int = 0
    seed: int = 0
    R: float = 0.0
    n_blocks: int = 8
    width: int = 32
    alpha: float = 2.0
    dim_grain: int = 1

    def __post_init__(self):
        self.lr_milestones = [int(m) for m in self.lr_milestones]
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr_milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.stage1_iters:
            raise ValueError(f"lr_milestones must be below stage1_iters={self.stage1_iters}")
        if self.batch_size < 1 or self.crop < 2 or self.crop % 2:
            raise ValueError("batch_size must be >= 1 and crop a positive even number")
        if not 0.0 <= self.R <= 1.0:
            raise ValueError(f"R must lie in [0, 1], got {self.R}")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainingConfig":
        base = dict(stage1_iters=500_000, stage2_iters=5_000, lr_milestones=[100_000, 200_000, 300_000, 400_000])
        base.update(overrides)
        return cls(**base)

    @property
    def milestones(self) -> list[int]:
        if self.lr_milestones:
            return list(self.lr_milestones)
        n = self.stage1_iters
        return sorted(m for m in {int(round(n * f)) for f in (0.2, 0.4, 0.6, 0.8)} if 0 < m < n)

    def learning_rate(self, iteration: int) -> float:
        """Stage-1 rate after ``iteration`` completed updates."""
        halvings = sum(1 for m in self.milestones if iteration >= m)
        ramp = min(1.0, (iteration + 1) / self.warmup_iters) if self.warmup_iters > 0 else 1.0
        return self.lr0 * 0.5**halvings * ramp


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def adam_step(params: list[Tensor], state: Adam, lr: float) -> None:
    if state.params is not params and [id(p) for p in state.params] != [id(p) for p in params]:
        raise ValueError("optimizer state belongs to a different parameter list")
    state.step(lr)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    norm = T.grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return norm


@dataclass
class Batch:
    grainy_hr: Tensor
    clean_hr: Tensor
    clean_lr: Tensor


def sample_batch(pairs: list[TrainingPair], cfg: TrainingConfig, rng: np.random.Generator, dtype=np.float32) -> Batch:
    idx = rng.integers(len(pairs), size=cfg.batch_size)
    crops = [random_crop_flip(pairs[i], cfg.crop, rng) for i in idx]
    return Batch(
        Tensor(to_batch([c.grainy_hr for c in crops]).astype(dtype)),
        Tensor(to_batch([c.clean_hr for c in crops]).astype(dtype)),
        Tensor(to_batch([c.clean_lr for c in crops]).astype(dtype)),
    )


def compute_losses(
    net: ThreeRINN,
    batch: Batch,
    noise: Tensor,
    stage: int = 1,
    R: float = 0.0,
    power_cfg: PowerModelConfig | None = None,
) -> dict[str, Tensor]:
    """All loss terms for one batch; ``noise`` is the latent sample for the inverse passes."""
    res = net.forward(batch.grainy_hr)
    parts = {
        "loss_forw": loss_forward(res.lr, batch.clean_lr),
        "loss_reg": loss_reg(res.z),
    }
    z_tilde = net.decode_latent(res.lr, noise)
    grainy = net.inverse_from_tilde(res.lr, z_tilde)
    clean = net.inverse_from_tilde(res.lr, net.zero_grain(z_tilde))
    parts["loss_back_g"] = loss_back(grainy, batch.grainy_hr)
    parts["loss_back_c"] = loss_back(clean, batch.clean_hr)
    if stage == 2:
        parts["loss_power"] = loss_power(res.lr, batch.clean_lr, R, power_cfg or PowerModelConfig())
        parts["loss_ssim"] = loss_ssim(res.lr, batch.clean_lr)
    return parts


@dataclass
class TrainingResult:
    net: ThreeRINN
    history: list[dict]


def _run(
    net: ThreeRINN,
    pairs: list[TrainingPair],
    cfg: TrainingConfig,
    weights: LossWeights,
    power_cfg: PowerModelConfig,
    stage: int,
) -> list[dict]:
    if not pairs:
        raise ValueError("empty dataset")
    iters = cfg.stage1_iters if stage == 1 else cfg.stage2_iters
    rng = np.random.default_rng([cfg.seed, stage])
    params = net.parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    total_fn = total_loss_stage1 if stage == 1 else total_loss_stage2
    history = []
    for it in range(iters):
        lr = cfg.learning_rate(it) if stage == 1 else cfg.stage2_lr
        batch = sample_batch(pairs, cfg, rng, net.dtype)
        noise = sample_latent((cfg.batch_size, 9, cfg.crop // 2, cfg.crop // 2), rng, net.dtype)
        parts = compute_losses(net, batch, noise, stage, cfg.R, power_cfg)
        try:
            total = total_fn(parts, weights)
        except NonFiniteError as exc:
            raise NonFiniteError(f"iteration {it}: {exc}") from None
        net.zero_grad()
        T.backward(total)
        clip_grad_norm(params, cfg.grad_clip)
        adam_step(params, opt, lr)
        row = {"iter": it, "loss_total": total.item(), "lr": lr}
        for key in HISTORY_COLUMNS[2:-1]:
            name = "loss_power" if key == "loss_pow" else key
            row[key] = parts[name].item() if name in parts else 0.0
        history.append(row)
        if it % 50 == 0 or it == iters - 1:
            log.info("stage %d iter %d total %.6g forw %.4g", stage, it, row["loss_total"], row["loss_forw"])
    return history


def train_stage1(
    pairs: list[TrainingPair],
    cfg: TrainingConfig,
    weights: LossWeights | None = None,
    net: ThreeRINN | None = None,
) -> TrainingResult:
    net = net or ThreeRINN(cfg.n_blocks, cfg.width, cfg.alpha, cfg.dim_grain, seed=cfg.seed)
    weights = weights or LossWeights()
    history = _run(net, pairs, cfg, weights, PowerModelConfig(), stage=1)
    net.reduction_rate = 0.0
    return TrainingResult(net, history)


def train_stage2(
    net: ThreeRINN,
    pairs: list[TrainingPair],
    cfg: TrainingConfig,
    weights: LossWeights | None = None,
    power_cfg: PowerModelConfig | None = None,
) -> TrainingResult:
    """Fine-tune a copy of ``net`` for the reduction rate ``cfg.R``."""
    tuned = copy.deepcopy(net)
    weights = weights or LossWeights(R=cfg.R)
    history = _run(tuned, pairs, cfg, weights, power_cfg or PowerModelConfig(), stage=2)
    tuned.reduction_rate = cfg.R
    return TrainingResult(tuned, history)


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["iter"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
