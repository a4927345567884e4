"""Command-line entry point.

Exit codes: 0 ok, 1 configuration, 2 I/O or file format, 3 shape, 4 numeric.
Every command that writes files also writes ``<output>.manifest.json`` with
the arguments, the effective configuration and content hashes of its inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import check_known, dump, populate, read_kv
from .errors import ConfigError, FormatError, NonFiniteError, ShapeError
from .imaging import (
    GRAIN_PRESETS,
    bicubic_downscale_x2,
    load_pairs,
    load_png,
    read_grain_config,
    save_png,
    synthetic_pairs,
    to_batch,
    write_manifest,
)
from .losses import LossWeights, PowerModelConfig
from .metrics import (
    EnergyCoefficients,
    energy_savings_report,
    evaluate,
    evaluate_ablation,
    read_chain_measurements,
    reductions,
    write_energy_report,
)
from .network import ThreeRINN, load_checkpoint, load_latent, sample_latent, save_checkpoint, save_latent
from .tensor import Tensor
from .training import TrainingConfig, train_stage1, train_stage2, write_history

log = logging.getLogger("threerinn")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SHAPE, EXIT_NUMERIC = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not I/O errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run_manifest(out: Path, args: argparse.Namespace, inputs: list, config: dict | None = None) -> Path:
    hashes = {}
    for p in inputs:
        if p is not None and Path(p).is_file():
            hashes[str(p)] = git_blob_sha1(Path(p).read_bytes())
    record = {
        "command": args.command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config": config or {},
        "inputs": hashes,
    }
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _image_tensor(img: np.ndarray, dtype) -> Tensor:
    return Tensor(to_batch([img]).astype(dtype))


def _hwc(t: Tensor) -> np.ndarray:
    return t.data[0].transpose(1, 2, 0).astype(np.float64)


def _load_dataset(args) -> list:
    if args.data is not None:
        pairs = load_pairs(args.data, args.split)
        if not pairs:
            raise ConfigError(f"no images in {args.data} for split {args.split!r}")
        return pairs
    return synthetic_pairs(args.synthetic, args.size, seed=args.data_seed)


def _configs(path, **overrides) -> tuple[TrainingConfig, LossWeights, PowerModelConfig]:
    entries = read_kv(path) if path is not None else {}
    check_known(entries, TrainingConfig, LossWeights, PowerModelConfig)
    cfg = populate(TrainingConfig, entries)
    weights = populate(LossWeights, {k: v for k, v in entries.items() if k != "R"})
    power_cfg = populate(PowerModelConfig, entries)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    weights = dataclasses.replace(weights, R=cfg.R)
    return cfg, weights, power_cfg


# --- commands ------------------------------------------------------------------------
def cmd_forward(args) -> int:
    net = load_checkpoint(args.checkpoint)
    img = load_png(args.input)
    h, w, _ = img.shape
    if h % 2 or w % 2:
        raise ShapeError(f"input {h}x{w} must have even height and width")
    with T.no_grad():
        res = net.forward(_image_tensor(img, net.dtype))
    lr = np.clip(_hwc(res.lr), 0.0, 1.0)
    save_png(lr, args.out_lr)
    if args.out_latent is not None:
        save_latent(res.z.data, args.out_latent)
    rate_y, rate_rgbw = reductions(lr, bicubic_downscale_x2(img))
    print(f"achieved reduction vs bicubic: luminance {rate_y:.4f} rgbw {rate_rgbw:.4f}")
    write_run_manifest(Path(args.out_lr), args, [args.checkpoint, args.input])
    return EXIT_OK


def cmd_inverse(args) -> int:
    if args.mode == "true-latent" and args.latent is None:
        raise ConfigError("--latent is required with --mode true-latent")
    net = load_checkpoint(args.checkpoint)
    lr = load_png(args.input)
    x = _image_tensor(lr, net.dtype)
    shape = (1, 9) + x.shape[2:]
    if args.mode == "true-latent":
        z = load_latent(args.latent)
        if z.shape != shape:
            raise ShapeError(f"latent shape {z.shape} does not match LR {x.shape}")
        z = Tensor(z.astype(net.dtype))
        mode = "true_latent"
    else:
        z = sample_latent(shape, np.random.default_rng(args.seed), net.dtype)
        mode = args.mode
    with T.no_grad():
        hr = net.inverse(x, z, mode)
    save_png(np.clip(_hwc(hr), 0.0, 1.0), args.out)
    write_run_manifest(Path(args.out), args, [args.checkpoint, args.input, args.latent])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, weights, _ = _configs(args.config, seed=args.seed, stage1_iters=args.iters)
    pairs = _load_dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_stage1(pairs, cfg, weights)
    save_checkpoint(result.net, out / "checkpoint.bin")
    write_history(result.history, out / "history.csv")
    (out / "config.txt").write_text(dump(cfg) + dump(weights))
    write_run_manifest(
        out / "checkpoint.bin",
        args,
        [args.config, args.data],
        {"training": dataclasses.asdict(cfg), "weights": dataclasses.asdict(weights)},
    )
    print(f"final loss_forw {result.history[-1]['loss_forw']:.6g}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, weights, power_cfg = _configs(args.config, seed=args.seed, stage2_iters=args.iters, R=args.R)
    net = load_checkpoint(args.checkpoint)
    pairs = _load_dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_stage2(net, pairs, cfg, weights, power_cfg)
    save_checkpoint(result.net, out / "checkpoint.bin")
    write_history(result.history, out / "history.csv")
    (out / "config.txt").write_text(dump(cfg) + dump(weights) + dump(power_cfg))
    write_run_manifest(
        out / "checkpoint.bin",
        args,
        [args.checkpoint, args.config, args.data],
        {
            "training": dataclasses.asdict(cfg),
            "weights": dataclasses.asdict(weights),
            "power": dataclasses.asdict(power_cfg),
        },
    )
    print(f"fine-tuned for R={cfg.R}")
    return EXIT_OK


def _power_from(path) -> PowerModelConfig:
    return populate(PowerModelConfig, read_kv(path), strict=True) if path is not None else PowerModelConfig()


def cmd_evaluate(args) -> int:
    net = load_checkpoint(args.checkpoint)
    pairs = _load_dataset(args)
    report = evaluate(net, pairs, seed=args.seed, quantize_lr=args.quantize, power_cfg=_power_from(args.power_config))
    report.write_csv(args.out)
    write_run_manifest(Path(args.out), args, [args.checkpoint, args.data, args.power_config])
    return EXIT_OK


def cmd_ablate(args) -> int:
    net = load_checkpoint(args.checkpoint)
    pairs = _load_dataset(args)
    report = evaluate_ablation(net, pairs, args.config_id, seed=args.seed, quantize_lr=args.quantize)
    report.write_csv(args.out)
    write_run_manifest(Path(args.out), args, [args.checkpoint, args.data])
    return EXIT_OK


def cmd_energy_report(args) -> int:
    coeffs = populate(EnergyCoefficients, read_kv(args.coefficients), strict=True) if args.coefficients else EnergyCoefficients()
    rows = energy_savings_report(read_chain_measurements(args.measurements), args.baseline, coeffs)
    write_energy_report(rows, args.out)
    write_run_manifest(Path(args.out), args, [args.measurements, args.coefficients], dataclasses.asdict(coeffs))
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    grain = read_grain_config(args.grain_config) if args.grain_config else GRAIN_PRESETS[args.preset]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = synthetic_pairs(args.n, args.size, seed=args.seed, preset=grain)
    entries = []
    n_val = int(round(args.n * args.val_fraction))
    for i, p in enumerate(pairs):
        clean, grainy = f"clean_{i:04d}.png", f"grainy_{i:04d}.png"
        save_png(p.clean_hr, out / clean)
        save_png(p.grainy_hr, out / grainy)
        entries.append((clean, grainy, "val" if i >= args.n - n_val else "train"))
    write_manifest(entries, out / "manifest.tsv")
    write_run_manifest(out / "manifest.tsv", args, [args.grain_config], dataclasses.asdict(grain))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_parameters, stage1_toy_problem

    net, loss_fn = stage1_toy_problem(seed=args.seed, size=args.size, n_blocks=args.blocks, width=args.width)
    results = check_parameters(loss_fn, list(net.named_parameters()), h=args.h, seed=args.seed)
    worst = max(results, key=lambda r: r.rel_error)
    bad = [r for r in results if r.rel_error > args.tol]
    for r in bad:
        print(f"FAIL {r.name} ({r.kind}) analytic {r.analytic:.6e} numeric {r.numeric:.6e} rel {r.rel_error:.2e}")
    print(f"{len(results)} checks, worst relative error {worst.rel_error:.3e} at {worst.name}")
    return EXIT_NUMERIC if bad else EXIT_OK


# --- parser ---------------------------------------------------------------------------
def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, help="dataset manifest (clean, grainy, split per line)")
    p.add_argument("--split", default=None)
    p.add_argument("--synthetic", type=int, default=8, help="procedural pairs when --data is absent")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="threerinn", description="Invertible rescaling, grain removal and energy reduction.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forward", help="HR image -> LR image (+ latent)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out-lr", type=Path, required=True)
    p.add_argument("--out-latent", type=Path)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("inverse", help="LR image -> HR image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--mode", choices=["grainy", "clean", "true-latent"], default="grainy")
    p.add_argument("--latent", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inverse)

    p = sub.add_parser("train", help="stage-1 training")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    _data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="stage-2 energy fine-tuning")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--R", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    _data_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="per-image metrics CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantize", action="store_true", help="round the LR image to 8 bits first")
    p.add_argument("--power-config", type=Path)
    _data_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="latent-configuration ablation CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config-id", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantize", action="store_true")
    _data_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("energy-report", help="distribution-chain energy savings CSV")
    p.add_argument("--measurements", type=Path, required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--coefficients", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_energy_report)

    p = sub.add_parser("make-dataset", help="write a synthetic grain dataset and manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(GRAIN_PRESETS), default="medium")
    p.add_argument("--grain-config", type=Path)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("gradcheck", help="finite-difference check of stage-1 gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
