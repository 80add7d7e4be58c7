"""Seeded synthetic models and calibration activations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ptqf
from .blockopt import BlockSpec
from .errors import ConfigError

PROFILES = ("heavy-tailed", "uniform")


@dataclass
class SynthSpec:
    hidden: int = 128
    blocks: int = 2
    layers_per_block: int = 2
    activation: str = "relu"
    samples: int = 8
    tokens: int = 32
    profile: str = "heavy-tailed"
    outlier_fraction: float = 0.05
    outlier_scale: float = 1000.0

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown activation profile {self.profile!r}; expected one of {PROFILES}")
        if self.hidden < 2 or self.blocks < 1 or self.samples < 1 or self.tokens < 1:
            raise ConfigError("hidden >= 2, blocks >= 1, samples >= 1 and tokens >= 1 are required")
        if self.layers_per_block not in (1, 2):
            raise ConfigError("layers_per_block must be 1 or 2")
        if not 0 <= self.outlier_fraction < 1 or self.outlier_scale < 1:
            raise ConfigError("invalid outlier profile")


def channel_scales(m: int, rng, profile="heavy-tailed", outlier_fraction=0.05, outlier_scale=1000.0):
    """Per-channel activation magnitudes.

    ``heavy-tailed`` puts a few channels 1000x above the rest, as seen in LLM
    activations; ``uniform`` gives every channel unit scale.
    """
    if profile == "uniform":
        return np.ones(m)
    if profile != "heavy-tailed":
        raise ConfigError(f"unknown activation profile {profile!r}")
    scale = np.exp(rng.normal(0.0, 0.3, size=m))
    n_out = max(1, int(round(outlier_fraction * m)))
    idx = rng.choice(m, size=n_out, replace=False)
    scale[idx] *= outlier_scale * rng.uniform(0.5, 1.0, size=n_out)
    return scale


def generate(seed: int, spec: SynthSpec | None = None):
    """Return ``(model, calibration, channel_scale)`` for a seeded toy stack."""
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    d = spec.hidden
    model = []
    for _ in range(spec.blocks):
        ws = [rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)) for _ in range(spec.layers_per_block)]
        model.append(BlockSpec(ws, spec.activation if spec.layers_per_block == 2 else "identity"))
    scale = channel_scales(d, rng, spec.profile, spec.outlier_fraction, spec.outlier_scale)
    calib = [rng.normal(size=(spec.tokens, d)) * scale for _ in range(spec.samples)]
    return model, calib, scale


def float32_roundtrip(model, calib):
    """Round weights and activations to the float32 precision of PTQF files."""
    model = [BlockSpec([w.astype(np.float32).astype(np.float64) for w in b.weights], b.activation)
             for b in model]
    calib = [x.astype(np.float32).astype(np.float64) for x in calib]
    return model, calib


def write_model(directory, model, calib, meta=None) -> Path:
    """Write a model directory: PTQF weights and calibration plus ``model.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = []
    for b, spec in enumerate(model):
        names = []
        for li, w in enumerate(spec.weights):
            name = f"block{b}.layer{li}.ptqf"
            ptqf.save(directory / name, w)
            names.append(name)
        blocks.append({"layers": names, "activation": spec.activation})
    cal = []
    for i, x in enumerate(calib):
        name = f"calib{i:03d}.ptqf"
        ptqf.save(directory / name, x)
        cal.append(name)
    manifest = {"blocks": blocks, "calibration": cal, "meta": meta or {}}
    path = directory / "model.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_model(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    model = [BlockSpec([ptqf.load(directory / n).astype(np.float64) for n in b["layers"]], b["activation"])
             for b in manifest["blocks"]]
    calib = [ptqf.load(directory / n).astype(np.float64) for n in manifest["calibration"]]
    return model, calib


def gen_synthetic(directory, seed: int, spec: SynthSpec | None = None) -> Path:
    spec = spec or SynthSpec()
    model, calib, _ = generate(seed, spec)
    return write_model(directory, model, calib, {"seed": seed, "synth": asdict(spec)})


def directional_instance(seed: int = 0, m: int = 32, samples: int = 4, tokens: int = 16,
                         scale: float = 0.05, mix: float = 0.3):
    """Small-magnitude 2-layer ReLU block whose quantized-path inputs are rotated.

    ``Xq = X @ ((1 - mix) I + mix Q)`` for a random orthogonal ``Q`` mimics an
    upstream error that changes feature direction rather than magnitude.
    Output norms stay O(1), so the angular term is not swamped by the L2 term.
    Returns ``(spec, [(X, Xq), ...])``.
    """
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, m)) for _ in range(2)]
    spec = BlockSpec(weights, "relu")
    X = [rng.normal(size=(tokens, m)) * scale for _ in range(samples)]
    Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
    R = (1.0 - mix) * np.eye(m) + mix * Q
    return spec, [(x, x @ R) for x in X]
