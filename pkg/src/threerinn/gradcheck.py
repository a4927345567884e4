"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .imaging import synthetic_pairs, to_batch
from .losses import LossWeights, total_loss_stage1
from .network import ThreeRINN, frozen_conditions
from .tensor import Tensor
from .training import Batch, compute_losses


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class CheckResult:
    name: str
    kind: str  # "direction" or "entry"
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def check_parameters(
    loss_fn: Callable[[], Tensor],
    named_params: list[tuple[str, Tensor]],
    h: float = 1e-5,
    entries_per_param: int = 2,
    seed: int = 0,
) -> list[CheckResult]:
    """Compare analytic and central-difference gradients for every parameter tensor.

    Each tensor gets one random-direction check (covering all its entries at
    once) plus ``entries_per_param`` single-entry checks at its largest
    gradient coordinates.  Detached latent-block conditions are held at their
    unperturbed values, matching what the analytic gradient differentiates.
    """
    rng = np.random.default_rng(seed)
    for _, p in named_params:
        p.grad = None
    with frozen_conditions("record"):
        loss = loss_fn()
    T.backward(loss)
    grads = {name: p.grad.astype(np.float64).copy() for name, p in named_params}

    def value() -> float:
        with T.no_grad(), frozen_conditions("replay"):
            return loss_fn().item()

    results = []
    for name, p in named_params:
        g = grads[name]
        base = p.data.copy()
        d = rng.standard_normal(p.shape)
        d /= np.linalg.norm(d)
        p.data = base + h * d
        fp = value()
        p.data = base - h * d
        fm = value()
        p.data = base
        results.append(CheckResult(name, "direction", float(np.sum(g * d)), (fp - fm) / (2 * h)))
        for flat_idx in np.argsort(-np.abs(g).ravel(), kind="stable")[:entries_per_param]:
            idx = np.unravel_index(flat_idx, p.shape)
            bumped = base.copy()
            bumped[idx] += h
            p.data = bumped
            fp = value()
            bumped[idx] -= 2 * h
            fm = value()
            p.data = base
            results.append(CheckResult(f"{name}{list(idx)}", "entry", float(g[idx]), (fp - fm) / (2 * h)))
    return results


def stage1_toy_problem(
    seed: int = 0,
    size: int = 16,
    batch: int = 1,
    n_blocks: int = 8,
    width: int = 32,
    final_scale: float = 0.1,
):
    """Float64 network with every layer randomised, a toy batch and a fixed latent sample.

    The last conv of each dense block is shrunk by ``final_scale``. At full scale eight
    stacked blocks amplify so much that an h-sized nudge flips the sign of many L1
    residuals and leaky-ReLU inputs, and finite differences stop measuring the derivative.

    Returns ``(net, loss_fn)`` where ``loss_fn()`` rebuilds the stage-1 total.
    """
    net = ThreeRINN(n_blocks=n_blocks, width=width, seed=seed, dtype=np.float64, zero_init=False)
    for _, blk in net.dense_blocks():
        blk.weights[-1].data *= final_scale
    pairs = synthetic_pairs(batch, size, seed=seed)
    b = Batch(
        Tensor(to_batch([p.grainy_hr for p in pairs]).astype(np.float64)),
        Tensor(to_batch([p.clean_hr for p in pairs]).astype(np.float64)),
        Tensor(to_batch([p.clean_lr for p in pairs]).astype(np.float64)),
    )
    noise = Tensor(np.random.default_rng(seed + 1).standard_normal((batch, 9, size // 2, size // 2)))
    weights = LossWeights()

    def loss_fn() -> Tensor:
        return total_loss_stage1(compute_losses(net, b, noise, stage=1), weights)

    return net, loss_fn
