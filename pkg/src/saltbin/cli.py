"""Command-line interface.

Exit codes: 0 ok, 1 config error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import packfmt
from .blockopt import gradcheck
from .errors import ConfigError, DataError, NumericError, SaltbinError
from .pipeline import PipelineConfig, dequantize_file, evaluate, read_quantized, run_quantize, load_inputs
from .preproc import RestorationConfig, restore, row_concentration, save_adapters
from .synth import SynthSpec, gen_synthetic, read_model, write_model
from .blockopt import BlockSpec

log = logging.getLogger("saltbin")

GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _print(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.opt = replace(cfg.opt, seed=args.seed)
        cfg.restoration = replace(cfg.restoration, seed=args.seed)
    if args.salient_ratio is not None:
        cfg.salient_ratio = args.salient_ratio
    if args.salient_bits is not None:
        cfg.salient_bits = args.salient_bits
    if args.no_preprocess:
        cfg.preprocess = False
    if args.no_optimize:
        cfg.optimize = False
    if getattr(args, "model", None):
        cfg.model_dir = str(args.model)
    cfg.validate()
    return cfg


def cmd_gen_synthetic(args) -> int:
    cfg = resolve_config(args)
    spec = replace(cfg.synth, profile=args.profile or cfg.synth.profile)
    if args.hidden:
        spec = replace(spec, hidden=args.hidden)
    if args.blocks:
        spec = replace(spec, blocks=args.blocks)
    path = gen_synthetic(_out(args), cfg.seed, spec)
    print(path)
    return 0


def _out(args) -> Path:
    if not args.out:
        raise ConfigError("--out DIR is required")
    return Path(args.out)


def cmd_quantize(args) -> int:
    cfg = resolve_config(args)
    report = run_quantize(cfg, _out(args))
    summary = [{"block": b["index"], "baseline_objective": b["baseline_objective"],
                "stored_objective": b["stored_objective"],
                "mean_errors": [l["mean_error"] for l in b["layers"]]} for b in report["blocks"]]
    _print({"out": str(_out(args)), "blocks": summary})
    return 0


def cmd_dequantize(args) -> int:
    src = Path(args.input)
    out = _out(args)
    files = sorted(src.glob("*.pq61")) if src.is_dir() else [src]
    if not files:
        raise DataError(f"no .pq61 files under {src}")
    if len(files) > 1 or src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / (f.stem + ".ptqf") for f in files]
    else:
        targets = [out]
    for f, t in zip(files, targets):
        dequantize_file(f, t)
        print(t)
    return 0


def cmd_eval(args) -> int:
    qdir = Path(args.quantized)
    saved = PipelineConfig.from_dict(json.loads((qdir / "config.json").read_text()))
    if args.model:
        model, calib = read_model(args.model)
    elif (qdir / "preprocessed" / "model.json").exists():
        model, calib = read_model(qdir / "preprocessed")
    else:
        model, calib = load_inputs(saved)
    _print(evaluate(model, calib, read_quantized(qdir), saved.salient_ratio))
    return 0


def cmd_pack_info(args) -> int:
    _print(packfmt.describe(Path(args.input).read_bytes()))
    return 0


def cmd_bitwidth(args) -> int:
    if args.preset:
        _print({"preset": args.preset, "bits": packfmt.PRESETS[args.preset]()})
        return 0
    ratio = args.salient_ratio if args.salient_ratio is not None else 0.2
    bits = args.salient_bits if args.salient_bits is not None else 4
    acc = packfmt.bit_accounting(args.m, args.n, ratio, bits, args.scale_width, args.zero_width,
                                 args.scale_vectors)
    _print(acc.as_dict())
    return 0


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    rcfg = replace(cfg.restoration, ratio=cfg.salient_ratio)
    if args.steps is not None:
        rcfg = replace(rcfg, steps=args.steps)
    if args.rank is not None:
        rcfg = replace(rcfg, rank=args.rank)
    model, calib = load_inputs(cfg)
    res = restore(model, cfg=rcfg, batches=calib)
    out = _out(args)
    merged = [BlockSpec(ws, s.activation) for ws, s in zip(res.merged, model)]
    write_model(out / "model", merged, calib, {"preprocessed": True, "seed": cfg.seed})
    save_adapters(out / "adapters", res, rcfg)
    _print({
        "initial_loss": res.initial_loss, "final_loss": res.final_loss, "steps": rcfg.steps,
        "row_concentration_before": [row_concentration(w, cfg.salient_ratio) for s in model for w in s.weights],
        "row_concentration_after": [row_concentration(w, cfg.salient_ratio) for ws in res.merged for w in ws],
    })
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    errors = gradcheck(args.configs, seed, args.h, use_nlc=not args.mse_only)
    worst = max(errors)
    _print({"configs": len(errors), "max_relative_error": worst, "tolerance": GRADCHECK_TOL,
            "passed": worst < GRADCHECK_TOL})
    if worst >= GRADCHECK_TOL:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON pipeline config")
    common.add_argument("--seed", type=int)
    common.add_argument("--salient-ratio", type=float)
    common.add_argument("--salient-bits", type=int)
    common.add_argument("--no-preprocess", action="store_true")
    common.add_argument("--no-optimize", action="store_true")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="saltbin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a seeded toy model")
    p.add_argument("--profile", choices=("heavy-tailed", "uniform"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--blocks", type=int)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("quantize", parents=[common], help="run the full quantization pipeline")
    p.add_argument("--model", metavar="DIR", help="model directory (default: synthetic from --seed)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", parents=[common], help="PQ61 file(s) to dense PTQF")
    p.add_argument("input")
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("eval", parents=[common], help="recompute error metrics from stored outputs")
    p.add_argument("quantized", metavar="QDIR")
    p.add_argument("--model", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pack-info", parents=[common], help="describe a PQ61 file")
    p.add_argument("input")
    p.set_defaults(func=cmd_pack_info)

    p = sub.add_parser("bitwidth", parents=[common], help="average bits per weight")
    p.add_argument("--preset", choices=sorted(packfmt.PRESETS))
    p.add_argument("--m", type=int, default=4096)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--scale-width", type=int, default=16)
    p.add_argument("--zero-width", type=int, default=16)
    p.add_argument("--scale-vectors", type=int, default=3)
    p.set_defaults(func=cmd_bitwidth)

    p = sub.add_parser("preprocess", parents=[common], help="restorative low-rank preprocessing")
    p.add_argument("--model", metavar="DIR")
    p.add_argument("--steps", type=int)
    p.add_argument("--rank", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--mse-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SaltbinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
