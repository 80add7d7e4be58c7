"""Restorative low-rank preprocessing and the row-concentration diagnostic.

The initially quantized model (activation mask + analytic binarization, no
scale learning) is frozen and a rank-``r`` adapter ``B @ A`` is trained per
layer so that ``Q0(W) + B A`` reproduces the full-precision model outputs.
Outputs are linear in each ``B A`` between frozen layers, so the adapter
gradients are exact. The learned update is merged into the original weights
(``W + B A``) to give the preprocessed model handed to quantization.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ptqf
from .blockopt import BlockSpec, propagate_full_precision
from .errors import ConfigError, NumericError, ShapeError
from .numerics import as_matrix
from .quant import dequantize, quantize_layer
from .saliency import build_mask, channel_saliency, weight_saliency_map

log = logging.getLogger(__name__)


@dataclass
class LowRankAdapter:
    B: np.ndarray   # (m, r)
    A: np.ndarray   # (r, n)

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"adapter factors do not compose: {self.B.shape} x {self.A.shape}")

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    def delta(self) -> np.ndarray:
        return self.B @ self.A


@dataclass
class RestorationConfig:
    steps: int = 200            # 20000 at full scale
    lr: float = 2e-3
    rank: int = 64
    seed: int = 0
    ratio: float = 0.2
    n_batches: int = 8
    tokens: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0 < self.ratio < 1:
            raise ConfigError("salient ratio must lie in (0, 1)")


@dataclass
class RestoreResult:
    merged: list                 # per block, list of merged (m, n) weights
    adapters: list               # per block, list of LowRankAdapter
    base: list                   # per block, frozen initial-quantized weights
    loss_trace: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    def model(self, like) -> list:
        return [BlockSpec(ws, spec.activation) for ws, spec in zip(self.merged, like)]


def merge(adapter: LowRankAdapter, W) -> np.ndarray:
    W = as_matrix(W, "weights")
    if adapter.B.shape[0] != W.shape[0] or adapter.A.shape[1] != W.shape[1]:
        raise ShapeError(f"adapter {adapter.B.shape[0]}x{adapter.A.shape[1]} does not fit weights {W.shape}")
    return W + adapter.B @ adapter.A


def row_concentration(W, ratio: float) -> float:
    """Share of the globally largest ``|W|`` entries that sit in the heaviest rows.

    The top ``ceil(ratio * m * n)`` entries are compared against the top
    ``ceil(ratio * m)`` rows ranked by L1 mass (ties to the lower row index).
    1.0 means every large entry lives in those rows.
    """
    W = as_matrix(W, "weights")
    sal = weight_saliency_map(W, ratio)
    n_rows = max(1, math.ceil(ratio * W.shape[0] - 1e-9))
    rows = np.argsort(-np.abs(W).sum(axis=1), kind="stable")[:n_rows]
    return float(sal[rows].sum() / sal.sum())


def initial_quantizer(ratio: float = 0.2):
    """Mask-plus-analytic-binarization quantizer used as the frozen base."""
    def quantize(W, X):
        mask = build_mask(channel_saliency(X), ratio)
        return dequantize(quantize_layer(W, mask))
    return quantize


def synthetic_batches(m: int, n_batches: int, tokens: int, seed: int, channel_scale=None) -> list:
    """Seeded Gaussian batches with a per-channel scale profile."""
    rng = np.random.default_rng(seed)
    scale = np.ones(m) if channel_scale is None else np.asarray(channel_scale, dtype=np.float64)
    return [rng.normal(size=(tokens, m)) * scale for _ in range(n_batches)]


def _flat_layers(model):
    return [(b, l) for b, spec in enumerate(model) for l in range(len(spec.weights))]


def _forward(model, weights, X):
    """Run the chain with per-block weights; return output and cached inputs."""
    cache = []
    h = X
    for spec, ws in zip(model, weights):
        block_cache = []
        for li, w in enumerate(ws):
            if li == 1 and spec.activation == "relu":
                z = h
                h = np.maximum(z, 0.0)
                block_cache.append((h, z))
            else:
                block_cache.append((h, None))
            h = h @ w
        cache.append(block_cache)
    return h, cache


def _backward(model, weights, cache, g):
    grads = [[None] * len(ws) for ws in weights]
    for b in range(len(model) - 1, -1, -1):
        for li in range(len(weights[b]) - 1, -1, -1):
            inp, pre = cache[b][li]
            grads[b][li] = inp.T @ g
            g = g @ weights[b][li].T
            if pre is not None:
                g = g * (pre > 0)
    return grads


def restoration_loss(model, weights, batches) -> float:
    total = 0.0
    for X in batches:
        target = propagate_full_precision(model, X)
        y, _ = _forward(model, weights, X)
        total += float(np.sum((y - target) ** 2)) / X.shape[0]
    return total / len(batches)


def adapter_gradients(model, base, adapters, X):
    """Loss on one batch and its exact gradients w.r.t. every ``(B, A)``."""
    weights = [[w + a.delta() for w, a in zip(ws, ads)] for ws, ads in zip(base, adapters)]
    target = propagate_full_precision(model, X)
    y, cache = _forward(model, weights, X)
    diff = y - target
    loss = float(np.sum(diff ** 2)) / X.shape[0]
    gW = _backward(model, weights, cache, 2.0 * diff / X.shape[0])
    out = [[(g @ a.A.T, a.B.T @ g) for g, a in zip(gs, ads)] for gs, ads in zip(gW, adapters)]
    return loss, out


def _layer_inputs(model, batches):
    """Full-precision inputs to every layer, pooled over batches."""
    inputs = [[[] for _ in spec.weights] for spec in model]
    for X in batches:
        _, cache = _forward(model, [spec.weights for spec in model], X)
        for b, block_cache in enumerate(cache):
            for li, (inp, _) in enumerate(block_cache):
                inputs[b][li].append(inp)
    return [[np.concatenate(x, axis=0) for x in block] for block in inputs]


def restore(model, quantizer=None, cfg: RestorationConfig | None = None, batches=None) -> RestoreResult:
    """Train low-rank adapters on a frozen initially-quantized copy of ``model``.

    ``model`` is a list of BlockSpec; its weights are never modified.
    ``quantizer(W, X_in)`` returns the frozen base for one layer (defaults to
    :func:`initial_quantizer`). ``batches`` defaults to seeded Gaussian data.
    """
    cfg = cfg or RestorationConfig()
    cfg.validate()
    quantizer = quantizer or initial_quantizer(cfg.ratio)
    if batches is None:
        batches = synthetic_batches(model[0].in_features, cfg.n_batches, cfg.tokens, cfg.seed)
    batches = [as_matrix(x, "batch") for x in batches]
    rng = np.random.default_rng(cfg.seed)

    inputs = _layer_inputs(model, batches)
    base = [[quantizer(w, x) for w, x in zip(spec.weights, xs)] for spec, xs in zip(model, inputs)]
    adapters = []
    for spec in model:
        block = []
        for w in spec.weights:
            m, n = w.shape
            r = min(cfg.rank, m, n)
            block.append(LowRankAdapter(np.zeros((m, r)), rng.normal(0, 1 / np.sqrt(n), size=(r, n))))
        adapters.append(block)

    def current():
        return [[w + a.delta() for w, a in zip(ws, ads)] for ws, ads in zip(base, adapters)]

    initial = restoration_loss(model, current(), batches)
    trace = []
    moments = [[[np.zeros_like(a.B), np.zeros_like(a.A), np.zeros_like(a.B), np.zeros_like(a.A)]
                for a in ads] for ads in adapters]
    for step in range(cfg.steps):
        X = batches[step % len(batches)]
        loss, grads = adapter_gradients(model, base, adapters, X)
        if not np.isfinite(loss):
            raise NumericError("restoration diverged", location=f"step {step}", trace=trace)
        trace.append(loss)
        t = step + 1
        c1 = 1 - cfg.beta1 ** t
        c2 = 1 - cfg.beta2 ** t
        for ads, gs, ms in zip(adapters, grads, moments):
            for a, (gB, gA), mm in zip(ads, gs, ms):
                for i, (p, g) in enumerate(((a.B, gB), (a.A, gA))):
                    mm[i] = cfg.beta1 * mm[i] + (1 - cfg.beta1) * g
                    mm[i + 2] = cfg.beta2 * mm[i + 2] + (1 - cfg.beta2) * g * g
                    p -= cfg.lr * (mm[i] / c1) / (np.sqrt(mm[i + 2] / c2) + cfg.eps)
    final = restoration_loss(model, current(), batches)
    if not np.isfinite(final):
        raise NumericError("restoration diverged", location="final evaluation", trace=trace)
    log.info("restoration loss %.6g -> %.6g over %d steps", initial, final, cfg.steps)
    merged = [[merge(a, spec_w) for a, spec_w in zip(ads, spec.weights)] for ads, spec in zip(adapters, model)]
    return RestoreResult(merged, adapters, base, trace, initial, final)


def save_adapters(directory, result: RestoreResult, cfg: RestorationConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = {}
    for b, ads in enumerate(result.adapters):
        for li, a in enumerate(ads):
            name = f"block{b}.layer{li}"
            ptqf.save(directory / f"{name}.B.ptqf", a.B)
            ptqf.save(directory / f"{name}.A.ptqf", a.A)
            layers[name] = {"B": f"{name}.B.ptqf", "A": f"{name}.A.ptqf", "rank": a.rank}
    manifest = {"layers": layers, "rank": cfg.rank, "steps": cfg.steps, "seed": cfg.seed,
                "initial_loss": result.initial_loss, "final_loss": result.final_loss}
    path = directory / "adapters.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_adapters(directory) -> dict:
    directory = Path(directory)
    manifest = json.loads((directory / "adapters.json").read_text())
    return {name: LowRankAdapter(ptqf.load(directory / e["B"]), ptqf.load(directory / e["A"]))
            for name, e in manifest["layers"].items()}
