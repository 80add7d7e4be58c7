"""Block-wise learning of binarization scaling vectors.

A block is one or two linear layers with an optional ReLU between them. The
objective compares full-precision and quantized block outputs in two
branches, each scored with ``||f1 - f2|| - log(cos(f1, f2))``:

    E(F(X, W), F(Xq, W')) + E(F(Xq, W), F(Xq, W'))

where ``Xq`` is the input produced by the already-quantized predecessors and
``W'`` the dequantized weights under the current scaling vectors. Only the
scaling vectors are learnable; signs, codes and masks are constants, so the
gradients below are exact.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, IntegrityError, NumericError, ShapeError
from .numerics import as_matrix, cosine_similarity, l2_distance
from .quant import QuantizedLayer, ScalingVectors, dequantize, quantize_layer
from .saliency import ChannelMask

log = logging.getLogger(__name__)

NLC_EPS = 1e-8
ACTIVATIONS = ("identity", "relu")


@dataclass
class BlockSpec:
    weights: list
    activation: str = "identity"
    masks: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = [as_matrix(w, "weights") for w in self.weights]
        if not 1 <= len(self.weights) <= 2:
            raise ConfigError(f"a block holds 1 or 2 layers, got {len(self.weights)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"layer shapes do not compose: {a.shape} then {b.shape}")

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class OptConfig:
    lr_scale: float = 1e-3
    lr_angular: float = 5e-4
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    use_nlc: bool = True

    def validate(self) -> None:
        if self.lr_scale < 0 or self.lr_angular < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.weight_decay != 0.0:
            raise ConfigError("weight decay is fixed at 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid moment decay or epsilon")


# --------------------------------------------------------------------------
# distance metric
# --------------------------------------------------------------------------

def nlc_loss(f1, f2) -> float:
    c = cosine_similarity(f1, f2)
    return float(-np.log(min(max(c, NLC_EPS), 1.0)))


def distance_metric(f1, f2, use_nlc: bool = True) -> float:
    d = l2_distance(f1, f2)
    return d + nlc_loss(f1, f2) if use_nlc else d


def _distance_grad(target: np.ndarray, y: np.ndarray, use_nlc: bool = True):
    """Value of the distance metric and its gradient with respect to ``y``."""
    diff = y - target
    dist = float(np.linalg.norm(diff))
    grad = diff / dist if dist > 0 else np.zeros_like(y)
    value = dist
    if use_nlc:
        nt = np.linalg.norm(target)
        ny = np.linalg.norm(y)
        if nt == 0 or ny == 0:
            raise DegenerateInputError("zero-norm block output")
        c = float(np.sum(target * y) / (nt * ny))
        c = min(c, 1.0)
        if c > NLC_EPS:
            value += -np.log(c)
            dc = target / (nt * ny) - c * y / (ny * ny)
            grad = grad - dc / c
        else:
            value += -np.log(NLC_EPS)
    return value, grad


# --------------------------------------------------------------------------
# block forward / backward
# --------------------------------------------------------------------------

def block_forward(X, weights, activation="identity") -> np.ndarray:
    h = X @ weights[0]
    if len(weights) == 2:
        if activation == "relu":
            h = np.maximum(h, 0.0)
        h = h @ weights[1]
    return h


def _dequantized(q_layers) -> list:
    return [dequantize(q) for q in q_layers]


def _check(spec: BlockSpec, q_layers, X, Xq):
    if len(q_layers) != len(spec.weights):
        raise ShapeError(f"{len(q_layers)} quantized layers for a {len(spec.weights)}-layer block")
    for w, q in zip(spec.weights, q_layers):
        if tuple(q.shape) != w.shape:
            raise ShapeError(f"quantized layer {q.shape} does not match weights {w.shape}")
    X = as_matrix(X, "activations")
    Xq = as_matrix(Xq, "quantized activations")
    if X.shape != Xq.shape:
        raise ShapeError(f"X {X.shape} and X_q {Xq.shape} differ")
    if X.shape[1] != spec.in_features:
        raise ShapeError(f"activations have {X.shape[1]} channels, block expects {spec.in_features}")
    return X, Xq


def objective_terms(spec: BlockSpec, q_layers, X, Xq, use_nlc: bool = True):
    """Return ``(total, branch1, branch2)`` of the two-branch objective."""
    X, Xq = _check(spec, q_layers, X, Xq)
    wq = _dequantized(q_layers)
    y = block_forward(Xq, wq, spec.activation)
    t1 = block_forward(X, spec.weights, spec.activation)
    t2 = block_forward(Xq, spec.weights, spec.activation)
    b1 = distance_metric(t1, y, use_nlc)
    b2 = distance_metric(t2, y, use_nlc)
    return b1 + b2, b1, b2


def block_objective(spec: BlockSpec, q_layers, X, Xq, use_nlc: bool = True) -> float:
    return objective_terms(spec, q_layers, X, Xq, use_nlc)[0]


def _scaling_grad(q: QuantizedLayer, gW: np.ndarray) -> ScalingVectors:
    m, n = q.shape
    s = q.scaling
    rows = q.binary_rows
    pm = np.where(q.signs, 1.0, -1.0)
    g_rows = gW[rows] * pm                     # d obj / d(alpha_s*alpha_r1*alpha_r2) per entry
    row_sum = g_rows @ s.alpha_r2              # sum_j g[i,j] * r2[j] * sign
    g_s = np.zeros(m)
    g_r1 = np.zeros(m)
    g_s[rows] = s.alpha_r1[rows] * row_sum
    g_r1[rows] = s.alpha_s[rows] * row_sum
    g_r2 = (s.alpha_s[rows] * s.alpha_r1[rows]) @ g_rows
    return ScalingVectors(g_s, g_r1, g_r2)


def _weight_grads(Xq, wq, activation, g_out):
    if len(wq) == 1:
        return [Xq.T @ g_out]
    z = Xq @ wq[0]
    h = np.maximum(z, 0.0) if activation == "relu" else z
    g2 = h.T @ g_out
    gh = g_out @ wq[1].T
    if activation == "relu":
        gh = gh * (z > 0)
    return [Xq.T @ gh, g2]


def gradients(spec: BlockSpec, q_layers, X, Xq, use_nlc: bool = True):
    """Objective value and its gradient w.r.t. every layer's scaling vectors.

    Returns ``(value, [ScalingVectors, ...])`` with one gradient per layer.
    """
    X, Xq = _check(spec, q_layers, X, Xq)
    wq = _dequantized(q_layers)
    y = block_forward(Xq, wq, spec.activation)
    t1 = block_forward(X, spec.weights, spec.activation)
    t2 = block_forward(Xq, spec.weights, spec.activation)
    v1, g1 = _distance_grad(t1, y, use_nlc)
    v2, g2 = _distance_grad(t2, y, use_nlc)
    g_out = g1 + g2
    if not np.all(np.isfinite(g_out)):
        raise NumericError("non-finite output gradient", location="block output")
    grads = []
    for idx, (q, gW) in enumerate(zip(q_layers, _weight_grads(Xq, wq, spec.activation, g_out))):
        g = _scaling_grad(q, gW)
        if not np.all(np.isfinite(g.flat())):
            raise NumericError("non-finite scaling gradient", location=f"layer {idx}")
        grads.append(g)
    return v1 + v2, grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class AdamW:
    """Decoupled-decay Adam over a list of ScalingVectors, one lr per group."""

    def __init__(self, params, lr_scale, lr_angular, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = {"alpha_s": lr_scale, "alpha_r1": lr_angular, "alpha_r2": lr_angular}
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [{k: np.zeros_like(getattr(p, k)) for k in self.lr} for p in params]
        self.v = [{k: np.zeros_like(getattr(p, k)) for k in self.lr} for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k, lr in self.lr.items():
                x = getattr(p, k)
                gk = getattr(g, k)
                m[k] = b1 * m[k] + (1 - b1) * gk
                v[k] = b2 * v[k] + (1 - b2) * gk * gk
                if self.weight_decay:
                    x -= lr * self.weight_decay * x
                x -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


@dataclass
class OptState:
    params: list
    optimizer: AdamW
    step: int = 0
    best_objective: float = np.inf
    best_params: list = None


@dataclass
class OptResult:
    scaling: list
    initial_objective: float
    best_objective: float
    trace: list          # (step, objective, branch1, branch2)
    epoch_objectives: list
    best_trace: list     # best-so-far after each evaluation

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "objective", "branch1", "branch2"])
            for row in self.trace:
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def calibration_objective(spec, q_layers, calib, use_nlc=True) -> float:
    return float(np.mean([block_objective(spec, q_layers, x, xq, use_nlc) for x, xq in calib]))


def output_cosine(spec, q_layers, calib) -> float:
    """Mean cosine between ``F(X, W)`` and ``F(Xq, W')`` over calibration pairs."""
    wq = _dequantized(q_layers)
    return float(np.mean([cosine_similarity(block_forward(x, spec.weights, spec.activation).ravel(),
                                            block_forward(xq, wq, spec.activation).ravel())
                          for x, xq in calib]))


def optimize_scales(spec: BlockSpec, q_layers, calib, cfg: OptConfig | None = None) -> OptResult:
    """Learn the scaling vectors of every layer in a block.

    ``calib`` is a list of ``(X, Xq)`` pairs, one per calibration sample; each
    step uses one sample. The sample order is shuffled once with ``cfg.seed``
    and reused for every epoch. Returns the parameters with the lowest mean
    calibration objective seen (evaluated before training and after each
    epoch), which therefore never score worse than the initial ones.
    """
    cfg = cfg or OptConfig()
    cfg.validate()
    calib = [(np.asarray(x, float), np.asarray(xq, float)) for x, xq in calib]
    if not calib:
        raise ConfigError("at least one calibration sample is required")
    params = [q.scaling.copy() for q in q_layers]
    layers = [q.with_scaling(p) for q, p in zip(q_layers, params)]
    state = OptState(params, AdamW(params, cfg.lr_scale, cfg.lr_angular, (cfg.beta1, cfg.beta2),
                                   cfg.eps, cfg.weight_decay))
    order = np.random.default_rng(cfg.seed).permutation(len(calib))

    initial = calibration_objective(spec, layers, calib, cfg.use_nlc)
    if not np.isfinite(initial):
        raise NumericError("initial objective is not finite", location="epoch 0")
    state.best_objective = initial
    state.best_params = [p.copy() for p in params]
    trace, epochs, best_trace = [], [initial], [initial]

    for epoch in range(cfg.epochs):
        for idx in order:
            x, xq = calib[idx]
            try:
                with np.errstate(all="ignore"):
                    _, b1, b2 = objective_terms(spec, layers, x, xq, cfg.use_nlc)
                    value, grads = gradients(spec, layers, x, xq, cfg.use_nlc)
            except (NumericError, IntegrityError, DegenerateInputError) as exc:
                raise NumericError(f"objective diverged: {exc}", location=f"step {state.step}",
                                   trace=trace) from exc
            trace.append((state.step, value, b1, b2))
            if not np.isfinite(value):
                raise NumericError("objective diverged", location=f"step {state.step}", trace=trace)
            state.optimizer.step(params, grads)
            state.step += 1
        try:
            with np.errstate(all="ignore"):
                obj = calibration_objective(spec, layers, calib, cfg.use_nlc)
        except (IntegrityError, DegenerateInputError) as exc:
            raise NumericError(f"objective diverged: {exc}", location=f"epoch {epoch + 1}", trace=trace) from exc
        if not np.isfinite(obj):
            raise NumericError("objective diverged", location=f"epoch {epoch + 1}", trace=trace)
        epochs.append(obj)
        if obj < state.best_objective:
            state.best_objective = obj
            state.best_params = [p.copy() for p in params]
        best_trace.append(state.best_objective)
        log.debug("epoch %d objective %.6g best %.6g", epoch + 1, obj, state.best_objective)

    return OptResult(state.best_params, initial, state.best_objective, trace, epochs, best_trace)


# --------------------------------------------------------------------------
# block chaining
# --------------------------------------------------------------------------

def propagate_quantized_input(previous, X) -> np.ndarray:
    """Feed ``X`` through already-quantized predecessor blocks.

    ``previous`` is a sequence of ``(BlockSpec, q_layers)`` pairs in model
    order; an empty sequence returns ``X`` unchanged.
    """
    h = as_matrix(X, "activations")
    for i, (spec, q_layers) in enumerate(previous):
        wq = _dequantized(q_layers)
        if h.shape[1] != wq[0].shape[0]:
            raise ShapeError(f"block {i} expects {wq[0].shape[0]} channels, got {h.shape[1]}")
        h = block_forward(h, wq, spec.activation)
    return h


def propagate_full_precision(previous, X) -> np.ndarray:
    h = as_matrix(X, "activations")
    for spec in previous:
        h = block_forward(h, spec.weights, spec.activation)
    return h


# --------------------------------------------------------------------------
# finite-difference check
# --------------------------------------------------------------------------

def finite_difference(spec, q_layers, X, Xq, h=1e-4, use_nlc=True):
    """Central differences of the block objective, one coordinate at a time."""
    out = []
    for q in q_layers:
        m, n = q.shape
        base = q.scaling.flat()
        g = np.zeros_like(base)
        for j in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                v = base.copy()
                v[j] += sign * h
                trial = [qq if qq is not q else q.with_scaling(ScalingVectors.from_flat(v, m, n))
                         for qq in q_layers]
                vals.append(block_objective(spec, trial, X, Xq, use_nlc))
            g[j] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic, numeric) -> float:
    """Max-norm relative error ``max|a - f| / max(|a|_inf, |f|_inf)``."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    f = np.concatenate([np.ravel(x) for x in numeric])
    denom = max(np.abs(a).max(), np.abs(f).max(), 1e-300)
    return float(np.abs(a - f).max() / denom)


def random_block(rng, n_layers, activation, h=1e-4, max_tries=100):
    """Random block, quantized layers with perturbed scales, and inputs.

    ReLU blocks are redrawn while a pre-activation sits closer to zero than a
    coordinate step can move it, since central differences straddling the
    kink are not a valid reference there.
    """
    for _ in range(max_tries):
        dims = rng.integers(3, 10, size=n_layers + 1)
        t = int(rng.integers(3, 8))
        weights = [rng.normal(0, 1 / np.sqrt(dims[i]), size=(dims[i], dims[i + 1])) for i in range(n_layers)]
        spec = BlockSpec(weights, activation)
        q_layers = []
        for w in weights:
            bits = rng.random(w.shape[0]) < 0.3
            q = quantize_layer(w, ChannelMask.from_bits(bits))
            s = q.scaling
            q = q.with_scaling(ScalingVectors(s.alpha_s * rng.uniform(0.7, 1.3, s.alpha_s.size),
                                              rng.uniform(0.7, 1.3, s.alpha_r1.size),
                                              rng.uniform(0.7, 1.3, s.alpha_r2.size)))
            q_layers.append(q)
        X = rng.normal(size=(t, dims[0]))
        Xq = X + 0.1 * rng.normal(size=X.shape)
        if activation == "relu" and n_layers == 2:
            wq = dequantize(q_layers[0])
            z = Xq @ wq
            s = q_layers[0].scaling
            coef = max(np.abs(s.alpha_r1 * s.alpha_r2.max()).max(),
                       np.abs(s.alpha_s).max() * np.abs(s.alpha_r2).max(),
                       np.abs(s.alpha_s * s.alpha_r1).max())
            reach = h * coef * np.abs(Xq).sum(axis=1).max()
            if np.abs(z).min() <= 10 * reach:
                continue
        return spec, q_layers, X, Xq
    raise NumericError("could not draw a kink-free random block")


def gradcheck(n_configs: int = 50, seed: int = 0, h: float = 1e-4, use_nlc: bool = True):
    """Compare analytic gradients with central differences on random blocks.

    Cycles through 1-layer, 2-layer identity and 2-layer ReLU blocks and
    returns the list of per-configuration relative errors.
    """
    rng = np.random.default_rng(seed)
    kinds = [(1, "identity"), (2, "identity"), (2, "relu"), (1, "relu")]
    errors = []
    for i in range(n_configs):
        n_layers, act = kinds[i % len(kinds)]
        spec, q_layers, X, Xq = random_block(rng, n_layers, act, h)
        _, grads = gradients(spec, q_layers, X, Xq, use_nlc)
        fd = finite_difference(spec, q_layers, X, Xq, h, use_nlc)
        errors.append(relative_error([g.flat() for g in grads], fd))
    return errors
