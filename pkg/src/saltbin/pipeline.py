"""End-to-end quantization driver and evaluation reports."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import packfmt, ptqf
from .blockopt import (BlockSpec, OptConfig, calibration_objective, optimize_scales,
                       propagate_full_precision, propagate_quantized_input)
from .errors import ConfigError, SaltbinError
from .preproc import RestorationConfig, restore, row_concentration, save_adapters
from .quant import dequantize, quantize_layer
from .saliency import KINDS, build_mask, channel_saliency, layer_error_and_bound
from .synth import SynthSpec, float32_roundtrip, generate, read_model, write_model

log = logging.getLogger(__name__)


def _from_dict(cls, data):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class PipelineConfig:
    seed: int = 0
    salient_ratio: float = 0.2
    salient_bits: int = 4
    saliency: str = "mean-abs"
    optimize: bool = True
    preprocess: bool = True
    model_dir: str | None = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    opt: OptConfig = field(default_factory=OptConfig)
    restoration: RestorationConfig = field(default_factory=RestorationConfig)

    def validate(self) -> None:
        if not 0 < self.salient_ratio < 1:
            raise ConfigError(f"salient ratio must lie in (0, 1), got {self.salient_ratio}")
        if self.salient_bits not in (2, 3, 4):
            raise ConfigError("salient bit-width must be 2, 3 or 4 to fit the nibble plane")
        if self.saliency not in KINDS:
            raise ConfigError(f"unknown saliency statistic {self.saliency!r}")
        self.synth.validate()
        self.opt.validate()
        self.restoration.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        sub = {"synth": SynthSpec, "opt": OptConfig, "restoration": RestorationConfig}
        for key, kind in sub.items():
            if key in data and isinstance(data[key], dict):
                data[key] = _from_dict(kind, data[key])
        return _from_dict(cls, data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


class StageError(SaltbinError):
    """Wraps a module error with the block index and pipeline stage."""

    def __init__(self, block, stage, cause: SaltbinError):
        super().__init__(f"block {block}, stage {stage}: {cause}")
        self.exit_code = cause.exit_code
        self.cause = cause


def load_inputs(cfg: PipelineConfig):
    if cfg.model_dir:
        return read_model(cfg.model_dir)
    model, calib, _ = generate(cfg.seed, cfg.synth)
    return float32_roundtrip(model, calib)


def layer_inputs(spec: BlockSpec, X, layer: int):
    h = X
    if layer == 1:
        h = X @ spec.weights[0]
        if spec.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def layer_metrics(X, W, Wq, ratio) -> dict:
    err, bound = layer_error_and_bound(X, W, Wq)
    mean_err, mean_bound = float(err.mean()), float(bound.mean())
    return {
        "mean_error": mean_err,
        "max_error": float(err.max()),
        "mean_bound": mean_bound,
        "bound_tightness": mean_err / mean_bound if mean_bound > 0 else 1.0,
        "row_concentration": row_concentration(W, ratio),
    }


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def quantize_model(model, calib, cfg: PipelineConfig):
    """Quantize every block in order; return packed bytes, layers and report."""
    packed, quantized, blocks_report, results = {}, [], [], []
    for b, spec in enumerate(model):
        stage = "propagate"
        try:
            X = [propagate_full_precision(model[:b], x) for x in calib]
            Xq = [propagate_quantized_input(list(zip(model[:b], quantized)), x) for x in calib]
            q_layers = []
            stage = "mask"
            for li, w in enumerate(spec.weights):
                inputs = np.concatenate([layer_inputs(spec, x, li) for x in X], axis=0)
                mask = build_mask(channel_saliency(inputs, cfg.saliency), cfg.salient_ratio)
                q_layers.append(quantize_layer(w, mask, cfg.salient_bits))
            stage = "optimize"
            pairs = list(zip(X, Xq))
            baseline = [packfmt.unpack(packfmt.pack(q)) for q in q_layers]
            if cfg.optimize:
                res = optimize_scales(spec, q_layers, pairs, cfg.opt)
                q_layers = [q.with_scaling(s) for q, s in zip(q_layers, res.scaling)]
                results.append(res)
            else:
                res = None
                results.append(None)
            stage = "pack"
            data = [packfmt.pack(q) for q in q_layers]
            stored = [packfmt.unpack(d) for d in data]
        except SaltbinError as exc:
            raise StageError(b, stage, exc) from exc

        layers_report = []
        for li, (w, q, q0, d) in enumerate(zip(spec.weights, stored, baseline, data)):
            name = f"block{b}.layer{li}"
            packed[name] = d
            inputs = np.concatenate([layer_inputs(spec, x, li) for x in X], axis=0)
            metrics = layer_metrics(inputs, w, dequantize(q), cfg.salient_ratio)
            metrics["baseline_mean_error"] = float(layer_error_and_bound(inputs, w, dequantize(q0))[0].mean())
            m, n = w.shape
            metrics["shape"] = [m, n]
            metrics["salient_rows"] = q.mask.k
            metrics["accounting"] = packfmt.bit_accounting(m, n, q.mask.k / m, cfg.salient_bits).as_dict()
            metrics["stored_bits_per_weight"] = 8 * len(d) / (m * n)
            layers_report.append({"name": name, **metrics})
        quantized.append(stored)
        block = {
            "index": b,
            "layers": layers_report,
            "baseline_objective": calibration_objective(spec, baseline, list(zip(X, Xq)), cfg.opt.use_nlc),
            "stored_objective": calibration_objective(spec, stored, list(zip(X, Xq)), cfg.opt.use_nlc),
        }
        if res is not None:
            block.update(initial_objective=res.initial_objective, best_objective=res.best_objective,
                         steps=len(res.trace), epoch_objectives=res.epoch_objectives)
        blocks_report.append(block)
    return packed, quantized, blocks_report, results


def run_quantize(cfg: PipelineConfig, out_dir) -> dict:
    """Mask, quantize, optimize and pack every block; write outputs to ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, calib = load_inputs(cfg)
    report = {"config": cfg.to_dict()}

    if cfg.preprocess:
        try:
            res = restore(model, cfg=replace(cfg.restoration, ratio=cfg.salient_ratio), batches=calib)
        except SaltbinError as exc:
            raise StageError(0, "preprocess", exc) from exc
        before = [row_concentration(w, cfg.salient_ratio) for s in model for w in s.weights]
        model = [BlockSpec(ws, s.activation) for ws, s in zip(res.merged, model)]
        model, _ = float32_roundtrip(model, [])
        write_model(out / "preprocessed", model, calib, {"source": cfg.model_dir or "synthetic"})
        save_adapters(out / "adapters", res, cfg.restoration)
        report["preprocess"] = {
            "initial_loss": res.initial_loss, "final_loss": res.final_loss,
            "row_concentration_before": before,
            "row_concentration_after": [row_concentration(w, cfg.salient_ratio) for s in model for w in s.weights],
        }

    packed, _, blocks, results = quantize_model(model, calib, cfg)
    for name, data in packed.items():
        (out / f"{name}.pq61").write_bytes(data)
    for b, res in enumerate(results):
        if res is not None:
            res.write_trace_csv(out / f"block{b}.trace.csv")
    report["blocks"] = blocks
    report["model"] = {
        "blocks": [{"layers": [f"block{b}.layer{li}.pq61" for li in range(len(s.weights))],
                    "activation": s.activation} for b, s in enumerate(model)],
    }
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "report.json", report)
    return report


def read_quantized(directory):
    directory = Path(directory)
    report = json.loads((directory / "report.json").read_text())
    return [[packfmt.unpack((directory / name).read_bytes()) for name in b["layers"]]
            for b in report["model"]["blocks"]]


def evaluate(model, calib, quantized, ratio=0.2) -> dict:
    """Per-layer error/bound metrics of stored quantized layers on ``calib``."""
    layers = []
    for b, (spec, qs) in enumerate(zip(model, quantized)):
        X = [propagate_full_precision(model[:b], x) for x in calib]
        for li, (w, q) in enumerate(zip(spec.weights, qs)):
            inputs = np.concatenate([layer_inputs(spec, x, li) for x in X], axis=0)
            layers.append({"name": f"block{b}.layer{li}", **layer_metrics(inputs, w, dequantize(q), ratio)})
    out_fp = np.concatenate([propagate_full_precision(model, x) for x in calib])
    out_q = np.concatenate([propagate_quantized_input(list(zip(model, quantized)), x) for x in calib])
    cos = float(np.sum(out_fp * out_q) / (np.linalg.norm(out_fp) * np.linalg.norm(out_q)))
    return {"layers": layers, "model_output_cosine": cos,
            "model_output_rel_error": float(np.linalg.norm(out_q - out_fp) / np.linalg.norm(out_fp))}


def dequantize_file(src, dst) -> np.ndarray:
    W = dequantize(packfmt.unpack(Path(src).read_bytes()))
    ptqf.save(dst, W)
    return W

