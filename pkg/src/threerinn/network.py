"""The invertible rescaling / grain-removal / energy-reduction network.

Layout of one pass::

    HR (B,3,H,W) --haar--> low*0.5 (3 ch), high (9 ch)
                 --8 affine coupling blocks--> LR (3 ch), z_tilde (9 ch)
                 --conditional latent encoding (condition = LR)--> z

The inverse pass runs the same blocks backwards.  ``z_tilde`` is split into
a detail part (first ``9 - dim_grain`` channels) and a grain part (last
``dim_grain`` channels); zeroing the grain part yields grain-free output.
"""

from __future__ import annotations

import contextlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import FormatError, NonFiniteError, ShapeError
from .haar import SubbandTensor, haar_forward, haar_inverse
from .tensor import Tensor

LOW_CHANNELS = 3
HIGH_CHANNELS = 9
LEAKY_SLOPE = 0.2

CHECKPOINT_MAGIC = b"3RINN"
CHECKPOINT_VERSION = 1
LATENT_MAGIC = b"3RZ0"

MODES = ("grainy", "clean", "true_latent")


def scale_map(raw: Tensor, alpha: float) -> Tensor:
    """Bounded log-scale ``alpha * (2*sigmoid(raw) - 1)``, written as ``alpha*tanh(raw/2)``."""
    return T.tanh(raw * 0.5) * alpha


class DenseBlock:
    """Five 3x3 conv layers with dense connectivity and leaky ReLU in between.

    Layer ``k`` sees the block input concatenated with every earlier layer's
    output.  The last layer is zero-initialised so a fresh block outputs 0.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        width: int = 32,
        n_layers: int = 5,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        zero_last: bool = True,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
        for k in range(n_layers):
            cin = in_channels + k * width
            cout = out_channels if k == n_layers - 1 else width
            bound = gain * np.sqrt(3.0 / (cin * 9))
            if k == n_layers - 1 and zero_last:
                w = np.zeros((cout, cin, 3, 3))
            else:
                w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
            self.weights.append(Tensor(w, requires_grad=True, dtype=dtype))
            self.biases.append(Tensor(np.zeros(cout), requires_grad=True, dtype=dtype))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.conv{k}.weight", w
            yield f"{prefix}.conv{k}.bias", b

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"dense block expects {self.in_channels} input channels, got {x.shape}")
        b, _, h, w = x.shape
        cols = [T.im2col3(T.transpose(x, (1, 0, 2, 3)))]
        last = self.n_layers - 1
        for k in range(self.n_layers):
            y = T.dense_layer(cols, self.weights[k], self.biases[k])
            if k < last:
                y = T.leaky_relu(y, LEAKY_SLOPE)
                cols.append(T.im2col3(T.reshape(y, (self.width, b, h, w))))
        y = T.reshape(y, (self.out_channels, b, h, w))
        return T.transpose(y, (1, 0, 2, 3))

    def reference(self, x: Tensor) -> Tensor:
        """Same function built from plain ``conv2d``/``concat`` (slow; for tests)."""
        feats = [x]
        for k in range(self.n_layers):
            y = T.conv2d(T.concat(feats, axis=1), self.weights[k], self.biases[k])
            if k < self.n_layers - 1:
                y = T.leaky_relu(y, LEAKY_SLOPE)
                feats.append(y)
        return y


class CouplingBlock:
    """Affine coupling between the 3 low and 9 high channels.

    forward:  h1' = h1 + phi(h2);  h2' = h2 * exp(s(psi(h1'))) + eta(h1')
    """

    def __init__(self, index: int, width: int = 32, alpha: float = 2.0, rng=None, dtype=np.float32):
        self.index = index
        self.alpha = alpha
        self.phi = DenseBlock(HIGH_CHANNELS, LOW_CHANNELS, width, rng=rng, dtype=dtype)
        self.psi = DenseBlock(LOW_CHANNELS, HIGH_CHANNELS, width, rng=rng, dtype=dtype)
        self.eta = DenseBlock(LOW_CHANNELS, HIGH_CHANNELS, width, rng=rng, dtype=dtype)

    def named_parameters(self, prefix: str):
        for name in ("phi", "psi", "eta"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")

    def _log_scale(self, h1: Tensor) -> Tensor:
        raw = self.psi(h1)
        if not np.all(np.isfinite(raw.data)):
            raise NonFiniteError(f"coupling block {self.index}: non-finite scale exponent")
        return scale_map(raw, self.alpha)

    def forward(self, h1: Tensor, h2: Tensor) -> tuple[Tensor, Tensor]:
        h1n = h1 + self.phi(h2)
        h2n = h2 * T.exp(self._log_scale(h1n)) + self.eta(h1n)
        return h1n, h2n

    def inverse(self, h1n: Tensor, h2n: Tensor) -> tuple[Tensor, Tensor]:
        h2 = (h2n - self.eta(h1n)) / T.exp(self._log_scale(h1n))
        h1 = h1n - self.phi(h2)
        return h1, h2


class LatentEncoder:
    """One-sided affine layer: z = (z_tilde - mu(c)) / exp(s(theta(c))).

    The condition ``c`` (the LR image) is always detached.
    """

    def __init__(self, width: int = 32, alpha: float = 2.0, rng=None, dtype=np.float32):
        self.alpha = alpha
        self.phi_g = DenseBlock(LOW_CHANNELS, HIGH_CHANNELS, width, rng=rng, dtype=dtype)
        self.theta_g = DenseBlock(LOW_CHANNELS, HIGH_CHANNELS, width, rng=rng, dtype=dtype)

    def named_parameters(self, prefix: str):
        yield from self.phi_g.named_parameters(f"{prefix}.phi_g")
        yield from self.theta_g.named_parameters(f"{prefix}.theta_g")

    def _shift_scale(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        c = _frozen.substitute(cond.detach())
        raw = self.theta_g(c)
        if not np.all(np.isfinite(raw.data)):
            raise NonFiniteError("latent encoding block: non-finite scale exponent")
        return self.phi_g(c), T.exp(scale_map(raw, self.alpha))

    def encode(self, z_tilde: Tensor, cond: Tensor) -> Tensor:
        _check_latent_pair(z_tilde, cond)
        mu, sigma = self._shift_scale(cond)
        return (z_tilde - mu) / sigma

    def decode(self, z: Tensor, cond: Tensor) -> Tensor:
        _check_latent_pair(z, cond)
        mu, sigma = self._shift_scale(cond)
        return z * sigma + mu


class _FrozenConditions:
    """Record/replay of latent-block conditions.

    The condition is detached, so the analytic gradient is that of a loss in
    which the condition is a constant.  Finite-difference checks reproduce
    that by recording the conditions once and replaying them while the
    parameters are perturbed.
    """

    def __init__(self):
        self.mode = None
        self.values: list[np.ndarray] = []
        self.pos = 0

    def substitute(self, c: Tensor) -> Tensor:
        if self.mode == "record":
            self.values.append(c.data.copy())
        elif self.mode == "replay":
            c = Tensor(self.values[self.pos])
            self.pos += 1
        return c


_frozen = _FrozenConditions()


@contextlib.contextmanager
def frozen_conditions(mode: str):
    """``mode="record"`` captures conditions; ``"replay"`` feeds them back in call order."""
    if mode not in ("record", "replay"):
        raise ValueError(f"mode must be 'record' or 'replay', got {mode!r}")
    if mode == "record":
        _frozen.values = []
    _frozen.mode, _frozen.pos = mode, 0
    try:
        yield _frozen
    finally:
        _frozen.mode = None


def _check_latent_pair(z: Tensor, cond: Tensor) -> None:
    if z.ndim != 4 or z.shape[1] != HIGH_CHANNELS:
        raise ShapeError(f"latent must be (B, 9, h, w), got {z.shape}")
    if cond.ndim != 4 or cond.shape[1] != LOW_CHANNELS:
        raise ShapeError(f"condition must be (B, 3, h, w), got {cond.shape}")
    if z.shape[0] != cond.shape[0] or z.shape[2:] != cond.shape[2:]:
        raise ShapeError(f"latent {z.shape} and condition {cond.shape} extents differ")


@dataclass
class ForwardResult:
    lr: Tensor  # unclamped low branch, pixel units
    z: Tensor  # normalised latent
    z_tilde: Tensor  # raw high branch


class ThreeRINN:
    """All learnable state plus metadata (``dim_grain``, the fine-tuning ``R``)."""

    def __init__(
        self,
        n_blocks: int = 8,
        width: int = 32,
        alpha: float = 2.0,
        dim_grain: int = 1,
        seed: int = 0,
        dtype=np.float32,
        zero_init: bool = True,
    ):
        if not 0 < dim_grain < HIGH_CHANNELS:
            raise ValueError(f"dim_grain must be in 1..8, got {dim_grain}")
        rng = np.random.default_rng(seed)
        self.n_blocks = n_blocks
        self.width = width
        self.alpha = alpha
        self.dim_grain = dim_grain
        self.reduction_rate = 0.0
        self.version = CHECKPOINT_VERSION
        self.blocks = [CouplingBlock(i, width, alpha, rng=rng, dtype=dtype) for i in range(n_blocks)]
        self.latent = LatentEncoder(width, alpha, rng=rng, dtype=dtype)
        if not zero_init:
            # every layer random, final ones included (used by gradient checks)
            for _, p in self.named_parameters():
                if p.ndim == 4 and not np.any(p.data):
                    fan_in = p.shape[1] * 9
                    p.data = rng.uniform(-1, 1, p.shape).astype(dtype) * np.sqrt(1.0 / fan_in)

    # --- parameters -------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"blocks.{i}")
        yield from self.latent.named_parameters("latent")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def dense_blocks(self) -> Iterator[tuple[str, DenseBlock]]:
        for i, blk in enumerate(self.blocks):
            for name in ("phi", "psi", "eta"):
                yield f"blocks.{i}.{name}", getattr(blk, name)
        yield "latent.phi_g", self.latent.phi_g
        yield "latent.theta_g", self.latent.theta_g

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "ThreeRINN":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        return self.blocks[0].phi.weights[0].dtype if self.blocks else self.latent.phi_g.weights[0].dtype

    @property
    def split_sizes(self) -> list[int]:
        return [HIGH_CHANNELS - self.dim_grain, self.dim_grain]

    # --- passes -----------------------------------------------------------
    def forward(self, x: Tensor) -> ForwardResult:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"forward expects (B, 3, H, W), got {x.shape}")
        sb = haar_forward(x)
        h1, h2 = sb.low * 0.5, sb.high
        for blk in self.blocks:
            h1, h2 = blk.forward(h1, h2)
        z = self.latent.encode(h2, h1)
        return ForwardResult(lr=h1, z=z, z_tilde=h2)

    def decode_latent(self, lr: Tensor, z: Tensor, bypass: bool = False) -> Tensor:
        return z if bypass else self.latent.decode(z, lr)

    def zero_grain(self, z_tilde: Tensor) -> Tensor:
        detail, grain = T.split(z_tilde, self.split_sizes, axis=1)
        return T.concat([detail, Tensor(np.zeros(grain.shape, dtype=grain.dtype))], axis=1)

    def inverse_from_tilde(self, lr: Tensor, z_tilde: Tensor) -> Tensor:
        h1, h2 = lr, z_tilde
        for blk in reversed(self.blocks):
            h1, h2 = blk.inverse(h1, h2)
        return haar_inverse(SubbandTensor(h1 * 2.0, h2))

    def inverse(self, lr: Tensor, z: Tensor, mode: str = "grainy", bypass_latent: bool = False) -> Tensor:
        if mode not in MODES:
            raise ValueError(f"unknown inverse mode {mode!r}; expected one of {MODES}")
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ShapeError(f"LR input must be (B, 3, h, w), got {lr.shape}")
        if z.shape != (lr.shape[0], HIGH_CHANNELS) + lr.shape[2:]:
            raise ShapeError(f"latent shape {z.shape} does not match LR {lr.shape}")
        z_tilde = self.decode_latent(lr, z, bypass_latent)
        if mode == "clean":
            z_tilde = self.zero_grain(z_tilde)
        return self.inverse_from_tilde(lr, z_tilde)


# --- functional surface ------------------------------------------------------
def coupling_forward(h1: Tensor, h2: Tensor, block: CouplingBlock) -> tuple[Tensor, Tensor]:
    _check_split(h1, h2)
    return block.forward(h1, h2)


def coupling_inverse(h1n: Tensor, h2n: Tensor, block: CouplingBlock) -> tuple[Tensor, Tensor]:
    _check_split(h1n, h2n)
    return block.inverse(h1n, h2n)


def _check_split(h1: Tensor, h2: Tensor) -> None:
    if h1.shape[1] != LOW_CHANNELS or h2.shape[1] != HIGH_CHANNELS:
        raise ShapeError(f"coupling expects a 3/9 channel split, got {h1.shape} and {h2.shape}")


def latent_encode(z_tilde: Tensor, lr_img: Tensor, net: ThreeRINN) -> Tensor:
    return net.latent.encode(z_tilde, lr_img)


def latent_decode(z: Tensor, lr_img: Tensor, net: ThreeRINN) -> Tensor:
    return net.latent.decode(z, lr_img)


def forward_pass(grainy_hr, net: ThreeRINN) -> tuple[Tensor, Tensor]:
    """Return ``(lr, z)`` for an NCHW batch (array or tensor)."""
    x = grainy_hr if isinstance(grainy_hr, Tensor) else Tensor(np.asarray(grainy_hr, dtype=net.dtype))
    res = net.forward(x)
    return res.lr, res.z


def inverse_pass(lr_img, z, mode: str, net: ThreeRINN, bypass_latent: bool = False) -> Tensor:
    lr = lr_img if isinstance(lr_img, Tensor) else Tensor(np.asarray(lr_img, dtype=net.dtype))
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=net.dtype))
    return net.inverse(lr, zt, mode, bypass_latent)


def sample_latent(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype))


def count_parameters(n_blocks: int = 8, width: int = 32, n_layers: int = 5) -> int:
    """Parameter count from architecture arithmetic alone."""

    def dense(cin: int, cout: int) -> int:
        total = 0
        for k in range(n_layers):
            ci = cin + k * width
            co = cout if k == n_layers - 1 else width
            total += ci * co * 9 + co
        return total

    per_block = dense(HIGH_CHANNELS, LOW_CHANNELS) + 2 * dense(LOW_CHANNELS, HIGH_CHANNELS)
    return n_blocks * per_block + 2 * dense(LOW_CHANNELS, HIGH_CHANNELS)


# --- checkpoints ---------------------------------------------------------------
# header: magic "3RINN", u32 version, u32 dim_grain, f64 R, f64 alpha, u32 count
# record: u16 name length, utf-8 name, u8 rank, u32 extents..., f32 LE values
_HEADER = struct.Struct("<IIddI")


def save_checkpoint(net: ThreeRINN, path) -> None:
    named = list(net.named_parameters())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(_HEADER.pack(CHECKPOINT_VERSION, net.dim_grain, float(net.reduction_rate), float(net.alpha), len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> ThreeRINN:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic")
    version, dim_grain, rate, alpha, count = r.unpack(_HEADER)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"version mismatch: file has {version}, expected {CHECKPOINT_VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last parameter record")
    n_blocks = len({k.split(".")[1] for k in tensors if k.startswith("blocks.")})
    try:
        width = tensors["latent.phi_g.conv0.weight"].shape[0]
    except KeyError:
        raise FormatError("checkpoint lacks latent encoding parameters") from None
    net = ThreeRINN(n_blocks=n_blocks, width=width, alpha=alpha, dim_grain=dim_grain)
    net.reduction_rate = rate
    expected = dict(net.named_parameters())
    if set(expected) != set(tensors):
        raise FormatError("parameter names do not match the architecture")
    for name, p in expected.items():
        if p.shape != tensors[name].shape:
            raise FormatError(f"{name}: stored shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name]
    return net


def save_latent(z: np.ndarray, path) -> None:
    z = np.asarray(z)
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<B", z.ndim))
        f.write(struct.pack(f"<{z.ndim}I", *z.shape))
        f.write(np.ascontiguousarray(z, dtype="<f4").tobytes())


def load_latent(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(LATENT_MAGIC)) != LATENT_MAGIC:
        raise FormatError("bad magic")
    (rank,) = r.unpack("<B")
    shape = r.unpack(f"<{rank}I")
    n = int(np.prod(shape))
    arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes in latent file")
    return arr
