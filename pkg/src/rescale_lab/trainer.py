"""Training: float64 emulation of the integer engine with straight-through
gradients, SGD fine-tuning under a fixed rescaler width, and float-mode
baseline training.

The emulated forward replays every integer operation (MAC, effective bias,
fixed-point multiply, round-half-up shift, zero-point add, clamp) in
binary64.  All intermediates are integers below 2**53, and the shifted
multiply is split so no product exceeds 2**49, so the replay is exact and
its outputs are bit-identical to the integer engine — training therefore
sees precisely the numbers deployment will produce.

Backward passes use the straight-through estimator: rounding nodes have
derivative one, saturation nodes pass gradient only inside their clamp
range, the rescale node contributes exactly its dyadic factor, and the
weight fake-quantizer passes gradient only while the shadow weight is
within the int8 clamp range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, OverflowEnvelopeError, ShapeError
from .kernels import (
    INT8_MAX,
    INT8_MIN,
    _conv_geometry,
    _pad_nhwc,
    _patches,
    activation_clamp,
    evaluate_int,
    quantize_real,
)
from .model_io import (
    ModelGraph,
    WEIGHTED_KINDS,
    materialize_rescalers,
    model_to_bytes,
    redeploy_weights,
    round_half_up,
)
from .qcore import INT32_MAX, INT32_MIN

_INT32_LO = float(INT32_MIN)
_INT32_HI = float(INT32_MAX)


# ---------------------------------------------------------------------------
# Configuration and shadow state
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Hyperparameters shared by fine-tuning and float baseline training."""

    learning_rate: float = 0.01
    epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    mode: str = "finetune-int"
    train_bias: bool = True

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise DomainError(
                f"learning rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise DomainError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise DomainError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in ("finetune-int", "float-baseline"):
            raise DomainError(f"unknown training mode {self.mode!r}")


@dataclass
class ShadowModel:
    """Real-valued copies of a model's integer weights for training.

    Weights and biases are cast directly from the integers (no
    dequantization); quantization parameters and rescalers stay frozen in
    the underlying graph and never change during training.
    """

    graph: ModelGraph
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]

    @property
    def k(self) -> int:
        return self.graph.k


def init_shadow(model: ModelGraph) -> ShadowModel:
    weights: list[np.ndarray | None] = []
    biases: list[np.ndarray | None] = []
    for layer in model.layers:
        if layer.kind in WEIGHTED_KINDS:
            weights.append(layer.weights.data.astype(np.float64))
            biases.append(layer.bias.astype(np.float64))
        else:
            weights.append(None)
            biases.append(None)
    return ShadowModel(graph=model, weights=weights, biases=biases)


def fake_quantize_weights(w: np.ndarray) -> np.ndarray:
    """Deployment-identical integerization: round half-up, clamp to int8."""
    return np.clip(round_half_up(w), INT8_MIN, INT8_MAX)


def fake_quantize_biases(b: np.ndarray) -> np.ndarray:
    return np.clip(round_half_up(b), _INT32_LO, _INT32_HI)


# ---------------------------------------------------------------------------
# Exact binary64 replay of the fixed-point rescale
# ---------------------------------------------------------------------------


def _emulated_rescale(acc: np.ndarray, m, s, rounding: bool) -> np.ndarray:
    """floor((acc*m + 2**(s-1)) / 2**s) per channel, exactly, in float64.

    For s <= 16 the product fits 47 bits directly (m <= 2**s).  For larger
    shifts the multiplicand is split at 16 bits; discarding the fractional
    part of the low product cannot change the final floor, and every
    intermediate stays below 2**49.  ``m`` and ``s`` broadcast against the
    trailing channel axis.
    """
    if not rounding:
        return acc * (np.asarray(m, dtype=np.float64) / np.exp2(s))
    m = np.asarray(m, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    direct = s <= 16
    half = np.exp2(s - 1)
    out_direct = np.floor((acc * m + half) * np.exp2(-s))
    m_hi = np.floor(m * np.exp2(-16.0))
    m_lo = m - m_hi * 65536.0
    low_floor = np.floor(acc * m_lo * np.exp2(-16.0))
    inner = acc * m_hi + low_floor + np.exp2(s - 17)
    out_split = np.floor(inner * np.exp2(-(s - 16)))
    return np.where(direct, out_direct, out_split)


def _check_envelope(acc: np.ndarray) -> None:
    peak = float(np.max(np.abs(acc))) if acc.size else 0.0
    if peak > _INT32_HI:
        raise OverflowEnvelopeError(
            f"emulated accumulator peak {peak:.0f} leaves the int32 envelope"
        )


# ---------------------------------------------------------------------------
# Emulated forward
# ---------------------------------------------------------------------------


def emulated_forward(
    shadow: ShadowModel, x_q: np.ndarray, rounding: bool = True
) -> tuple[np.ndarray, list[dict]]:
    """Replay the integer engine in float64 with fake-quantized weights.

    ``x_q`` must already be quantized with the model's input parameters.
    Returns the final int8-valued logits and a per-layer cache for
    :func:`ste_backward`.  With ``rounding=False`` the rounding nodes are
    removed (exact multiply by the dyadic factor, no floor): the smooth
    surrogate used for finite-difference checking.
    """
    model = shadow.graph
    x = np.asarray(x_q, dtype=np.float64)
    cache: list[dict] = []
    for idx, layer in enumerate(model.layers):
        entry: dict = {"kind": layer.kind}
        if layer.kind == "flatten":
            entry["in_shape"] = x.shape
            x = x.reshape(x.shape[0], -1)
            cache.append(entry)
            continue

        m = np.array([r.m for r in layer.rescalers], dtype=np.float64)
        s = np.array([r.s for r in layer.rescalers], dtype=np.float64)
        for r in layer.rescalers:
            if r.k != model.k:
                raise ShapeError(
                    f"layer {idx}: rescaler width {r.k} != shadow k {model.k}"
                )

        if layer.kind == "avgpool":
            n, h, w, c = x.shape
            w_h, w_w = layer.window
            if h % w_h or w % w_w:
                raise ShapeError(f"input {h}x{w} not divisible by window")
            sums = x.reshape(n, h // w_h, w_h, w // w_w, w_w, c).sum(axis=(2, 4))
            shifted = np.clip(_emulated_rescale(sums, m[0], s[0], rounding),
                              _INT32_LO, _INT32_HI)
            out = np.clip(shifted, INT8_MIN, INT8_MAX)
            entry.update(
                window=layer.window,
                in_shape=x.shape,
                factor=layer.rescalers[0].quantized_value,
                mask=(shifted >= INT8_MIN) & (shifted <= INT8_MAX),
            )
            x = out
            cache.append(entry)
            continue

        # Weighted layer: fake-quantize parameters, MAC, rescale, clamp.
        # In surrogate mode the rounding is removed, leaving only the clamp.
        w_shadow = shadow.weights[idx]
        b_shadow = shadow.biases[idx]
        if rounding:
            w_fq = fake_quantize_weights(w_shadow)
            b_fq = fake_quantize_biases(b_shadow)
        else:
            w_fq = np.clip(w_shadow, INT8_MIN, INT8_MAX)
            b_fq = np.clip(b_shadow, _INT32_LO, _INT32_HI)
        z_in = model.input_params.zero_point if idx == 0 else \
            model.layers[idx - 1].output.zero_point
        entry["w_mask"] = (w_shadow >= INT8_MIN) & (w_shadow <= INT8_MAX)
        entry["b_mask"] = (b_shadow >= _INT32_LO) & (b_shadow <= _INT32_HI)
        entry["w_fq"] = w_fq
        entry["z_in"] = z_in
        entry["stride"] = layer.stride

        if layer.kind == "dense":
            if x.ndim != 2:
                raise ShapeError(f"layer {idx}: dense expects a flat batch")
            b_eff = b_fq - z_in * w_fq.sum(axis=1)
            acc = x @ w_fq.T + b_eff
            entry["x"] = x
        else:
            if layer.kind == "conv2d":
                out_c, k_h, k_w, _ = w_fq.shape
            else:
                k_h, k_w, _ = w_fq.shape
            out_h, out_w, pads = _conv_geometry(x.shape, k_h, k_w, layer.stride,
                                                layer.padding)
            x_pad = _pad_nhwc(x, pads, z_in)
            cols = _patches(x_pad, k_h, k_w, *layer.stride)
            if layer.kind == "conv2d":
                flat = cols.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k_h * k_w * w_fq.shape[3])
                acc = flat @ w_fq.reshape(w_fq.shape[0], -1).T
                acc = acc.reshape(x.shape[0], out_h, out_w, w_fq.shape[0])
                b_eff = b_fq - z_in * w_fq.sum(axis=(1, 2, 3))
            else:
                acc = np.einsum("nhwckl,klc->nhwc", cols, w_fq)
                b_eff = b_fq - z_in * w_fq.sum(axis=(0, 1))
            acc = acc + b_eff
            entry["cols"] = cols
            entry["pads"] = pads
            entry["x_pad_shape"] = x_pad.shape
            entry["in_shape"] = x.shape
        _check_envelope(acc)

        z_out = layer.output.zero_point
        lo, hi = activation_clamp(layer.activation, layer.output)
        shifted = np.clip(_emulated_rescale(acc, m, s, rounding),
                          _INT32_LO, _INT32_HI)
        raw = shifted + z_out
        out = np.clip(raw, lo, hi)
        entry.update(
            factor=np.array([r.quantized_value for r in layer.rescalers]),
            mask=(raw >= lo) & (raw <= hi),
        )
        x = out
        cache.append(entry)
    return x, cache


# ---------------------------------------------------------------------------
# Straight-through backward
# ---------------------------------------------------------------------------


@dataclass
class Gradients:
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]


def _conv_dx(g: np.ndarray, w: np.ndarray, x_pad_shape, pads, stride) -> np.ndarray:
    """Scatter the accumulator gradient back to a padded conv input."""
    n, oh, ow, _ = g.shape
    _, k_h, k_w, _ = w.shape
    s_h, s_w = stride
    dx_pad = np.zeros(x_pad_shape)
    for ky in range(k_h):
        for kx in range(k_w):
            contrib = np.einsum("nhwo,oc->nhwc", g, w[:, ky, kx, :])
            dx_pad[:, ky : ky + oh * s_h : s_h, kx : kx + ow * s_w : s_w, :] += contrib
    top, bottom, left, right = pads
    h, w_ = x_pad_shape[1], x_pad_shape[2]
    return dx_pad[:, top : h - bottom, left : w_ - right, :]


def _depthwise_dx(g: np.ndarray, w: np.ndarray, x_pad_shape, pads, stride) -> np.ndarray:
    n, oh, ow, _ = g.shape
    k_h, k_w, _ = w.shape
    s_h, s_w = stride
    dx_pad = np.zeros(x_pad_shape)
    for ky in range(k_h):
        for kx in range(k_w):
            dx_pad[:, ky : ky + oh * s_h : s_h, kx : kx + ow * s_w : s_w, :] += \
                g * w[ky, kx, :]
    top, bottom, left, right = pads
    h, w_ = x_pad_shape[1], x_pad_shape[2]
    return dx_pad[:, top : h - bottom, left : w_ - right, :]


def ste_backward(
    shadow: ShadowModel, cache: list[dict], grad_out: np.ndarray
) -> Gradients:
    """Backpropagate through the emulated graph with clipped STE.

    ``grad_out`` is the loss gradient with respect to the final integer
    outputs.  Returns gradients aligned with the shadow's layer lists
    (``None`` for layers without parameters).
    """
    model = shadow.graph
    d_weights: list[np.ndarray | None] = [None] * len(model.layers)
    d_biases: list[np.ndarray | None] = [None] * len(model.layers)
    g = np.asarray(grad_out, dtype=np.float64)
    for idx in range(len(model.layers) - 1, -1, -1):
        entry = cache[idx]
        kind = entry["kind"]
        if kind == "flatten":
            g = g.reshape(entry["in_shape"])
            continue
        if kind == "avgpool":
            g = g * entry["mask"]  # clamp node
            g = g * entry["factor"]  # rescale node: exactly M_q
            w_h, w_w = entry["window"]
            n, oh, ow, c = g.shape
            g = np.broadcast_to(
                g[:, :, None, :, None, :], (n, oh, w_h, ow, w_w, c)
            ).reshape(entry["in_shape"])
            continue

        # Weighted layer.
        g = g * entry["mask"]  # activation / int8 clamp node
        g_acc = g * entry["factor"]  # rescale node: exactly M_q per channel
        w_fq = entry["w_fq"]
        z_in = entry["z_in"]
        if kind == "dense":
            x = entry["x"]
            d_w = g_acc.T @ (x - z_in)
            d_b = g_acc.sum(axis=0)
            g = g_acc @ w_fq
        elif kind == "conv2d":
            cols = entry["cols"]  # (n, oh, ow, c, kh, kw)
            d_w = np.einsum("nhwo,nhwckl->oklc", g_acc, cols - z_in)
            d_b = g_acc.sum(axis=(0, 1, 2))
            g = _conv_dx(g_acc, w_fq, entry["x_pad_shape"], entry["pads"],
                         entry["stride"])
        else:  # depthwise
            cols = entry["cols"]
            d_w = np.einsum("nhwc,nhwckl->klc", g_acc, cols - z_in)
            d_b = g_acc.sum(axis=(0, 1, 2))
            g = _depthwise_dx(g_acc, w_fq, entry["x_pad_shape"], entry["pads"],
                              entry["stride"])
        # Fake-quant STE: gradient passes only while the shadow value is
        # inside its clamp range.
        d_weights[idx] = d_w * entry["w_mask"]
        d_biases[idx] = d_b * entry["b_mask"]
    return Gradients(weights=d_weights, biases=d_biases)


# ---------------------------------------------------------------------------
# Loss head
# ---------------------------------------------------------------------------


def softmax_cross_entropy(
    logits_q: np.ndarray, labels: np.ndarray, out_params
) -> tuple[float, np.ndarray]:
    """Real softmax + cross-entropy on dequantized logits.

    Returns the mean loss and its gradient with respect to the integer
    logits (chain rule through ``y_real = scale * (y_q - zero_point)``).
    """
    n = logits_q.shape[0]
    y_real = out_params.scale * (np.asarray(logits_q, dtype=np.float64)
                                 - out_params.zero_point)
    shifted = y_real - y_real.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + eps)))
    grad_real = probs.copy()
    grad_real[np.arange(n), labels] -= 1.0
    grad_real /= n
    return loss, out_params.scale * grad_real


# ---------------------------------------------------------------------------
# Weight-change statistics
# ---------------------------------------------------------------------------


@dataclass
class WeightChangeStats:
    """How far retraining moved the deployed integers."""

    changed_ratio: float
    mean_abs_diff: float
    per_layer_histograms: list[dict[int, int]]
    layers_affected: int
    bias_changed_ratio: float

    def summary(self) -> str:
        return (
            f"changed {100 * self.changed_ratio:.4f}% of weights "
            f"(mean |delta| {self.mean_abs_diff:.4f}, "
            f"{self.layers_affected} layers affected, "
            f"bias changed {100 * self.bias_changed_ratio:.4f}%)"
        )


def weight_change_stats(original: ModelGraph, retrained: ModelGraph) -> WeightChangeStats:
    if len(original.layers) != len(retrained.layers):
        raise ShapeError("models have different layer counts")
    total = 0
    changed = 0
    abs_sum = 0
    layers_affected = 0
    histograms: list[dict[int, int]] = []
    bias_total = 0
    bias_changed = 0
    for before, after in zip(original.layers, retrained.layers):
        if before.kind != after.kind:
            raise ShapeError(f"layer kinds differ: {before.kind} vs {after.kind}")
        if before.kind not in WEIGHTED_KINDS:
            continue
        if before.weights.data.shape != after.weights.data.shape:
            raise ShapeError("weight shapes differ")
        delta = after.weights.data.astype(np.int64) - before.weights.data.astype(np.int64)
        values, counts = np.unique(delta[delta != 0], return_counts=True)
        hist = {int(v): int(c) for v, c in zip(values, counts)}
        histograms.append(hist)
        total += delta.size
        layer_changed = int(np.count_nonzero(delta))
        changed += layer_changed
        abs_sum += int(np.abs(delta).sum())
        if layer_changed:
            layers_affected += 1
        b_delta = after.bias.astype(np.int64) - before.bias.astype(np.int64)
        bias_total += b_delta.size
        bias_changed += int(np.count_nonzero(b_delta))
    return WeightChangeStats(
        changed_ratio=changed / total if total else 0.0,
        mean_abs_diff=abs_sum / changed if changed else 0.0,
        per_layer_histograms=histograms,
        layers_affected=layers_affected,
        bias_changed_ratio=bias_changed / bias_total if bias_total else 0.0,
    )


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class FinetuneResult:
    model: ModelGraph
    stats: WeightChangeStats
    history: list[EpochRecord] = field(default_factory=list)


def finetune(
    model: ModelGraph,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    cfg: TrainConfig,
    k: int,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
) -> FinetuneResult:
    """Rescale-aware fine-tuning at width ``k`` with plain SGD.

    Shadow weights start as exact copies of the integers; every forward
    pass replays the integer engine in float64; after each epoch the shadow
    is re-deployed (rounded back to integers) and evaluated.  Quantization
    parameters and rescalers never change.
    """
    base = materialize_rescalers(model, k) if model.k != k else model
    shadow = init_shadow(base)
    rng = np.random.default_rng(cfg.seed)
    images = np.asarray(train_images)
    if images.ndim == 3:
        images = images[..., np.newaxis]
    labels = np.asarray(train_labels)
    history: list[EpochRecord] = []
    current = base
    for epoch in range(cfg.epochs):
        order = rng.permutation(images.shape[0])
        losses = []
        for start in range(0, images.shape[0], cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            x_q = quantize_real(images[sel].astype(np.float64) / 255.0,
                                base.input_params)
            logits, cache = emulated_forward(shadow, x_q)
            loss, grad = softmax_cross_entropy(logits, labels[sel],
                                               base.layers[-1].output)
            grads = ste_backward(shadow, cache, grad)
            for i in range(len(shadow.weights)):
                if grads.weights[i] is None:
                    continue
                shadow.weights[i] -= cfg.learning_rate * grads.weights[i]
                if cfg.train_bias:
                    shadow.biases[i] -= cfg.learning_rate * grads.biases[i]
            losses.append(loss)
        current = redeploy_weights(base, shadow)
        accuracy = (
            evaluate_int(current, eval_images, eval_labels)
            if eval_images is not None
            else math.nan
        )
        history.append(EpochRecord(epoch=epoch + 1,
                                   loss=float(np.mean(losses)) if losses else math.nan,
                                   accuracy=accuracy))
    if cfg.epochs == 0:
        current = redeploy_weights(base, shadow)
    stats = weight_change_stats(base, current)
    return FinetuneResult(model=current, stats=stats, history=history)


# ---------------------------------------------------------------------------
# Float baseline training
# ---------------------------------------------------------------------------


def _float_forward_cache(model, x):
    from . import floatnet

    cache = {"x": x}
    cache["a1"] = floatnet.conv2d_real(x, model.conv1_w, model.conv1_b,
                                       padding="SAME")
    cache["h1"] = np.clip(cache["a1"], 0.0, 6.0)
    cache["p1"] = floatnet.avgpool_real(cache["h1"], (2, 2))
    cache["a2"] = floatnet.depthwise_real(cache["p1"], model.dw_w, model.dw_b,
                                          padding="SAME")
    cache["h2"] = np.clip(cache["a2"], 0.0, 6.0)
    cache["a3"] = floatnet.conv2d_real(cache["h2"], model.conv2_w, model.conv2_b,
                                       padding="VALID")
    cache["h3"] = np.clip(cache["a3"], 0.0, 6.0)
    cache["p2"] = floatnet.avgpool_real(cache["h3"], (2, 2))
    cache["flat"] = cache["p2"].reshape(x.shape[0], -1)
    cache["logits"] = cache["flat"] @ model.dense_w.T + model.dense_b
    return cache


def _relu6_mask(a):
    return (a > 0.0) & (a < 6.0)


def _avgpool_backward(g, in_shape, window):
    w_h, w_w = window
    n, oh, ow, c = g.shape
    spread = g / (w_h * w_w)
    return np.broadcast_to(
        spread[:, :, None, :, None, :], (n, oh, w_h, ow, w_w, c)
    ).reshape(in_shape)


def _float_backward(model, cache, grad_logits):
    grads = {}
    g = grad_logits
    grads["dense_w"] = g.T @ cache["flat"]
    grads["dense_b"] = g.sum(axis=0)
    g = (g @ model.dense_w).reshape(cache["p2"].shape)
    g = _avgpool_backward(g, cache["h3"].shape, (2, 2))
    g = g * _relu6_mask(cache["a3"])
    # conv2 is 1x1 VALID: dense over the channel axis at each position.
    h2 = cache["h2"]
    g_flat = g.reshape(-1, g.shape[-1])
    x_flat = h2.reshape(-1, h2.shape[-1])
    grads["conv2_w"] = (g_flat.T @ x_flat).reshape(model.conv2_w.shape)
    grads["conv2_b"] = g_flat.sum(axis=0)
    g = (g_flat @ model.conv2_w.reshape(model.conv2_w.shape[0], -1)).reshape(h2.shape)
    g = g * _relu6_mask(cache["a2"])
    # depthwise 3x3 SAME, stride 1.
    p1 = cache["p1"]
    k_h, k_w, _ = model.dw_w.shape
    _, _, pads = _conv_geometry(p1.shape, k_h, k_w, (1, 1), "SAME")
    p1_pad = _pad_nhwc(p1, pads, 0.0)
    cols = _patches(p1_pad, k_h, k_w, 1, 1)
    grads["dw_w"] = np.einsum("nhwc,nhwckl->klc", g, cols)
    grads["dw_b"] = g.sum(axis=(0, 1, 2))
    g = _depthwise_dx(g, model.dw_w, p1_pad.shape, pads, (1, 1))
    g = _avgpool_backward(g, cache["h1"].shape, (2, 2))
    g = g * _relu6_mask(cache["a1"])
    # conv1 3x3 SAME, stride 1.
    x = cache["x"]
    k_h, k_w = model.conv1_w.shape[1], model.conv1_w.shape[2]
    _, _, pads = _conv_geometry(x.shape, k_h, k_w, (1, 1), "SAME")
    x_pad = _pad_nhwc(x, pads, 0.0)
    cols = _patches(x_pad, k_h, k_w, 1, 1)
    grads["conv1_w"] = np.einsum("nhwo,nhwckl->oklc", g, cols)
    grads["conv1_b"] = g.sum(axis=(0, 1, 2))
    return grads


def train_float(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    cfg: TrainConfig,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
):
    """Train the float reference network from scratch with plain SGD.

    Deterministic for a fixed config: initialization, batch order, and all
    arithmetic depend only on the seed and the data.  Returns the trained
    float model and a per-epoch history of (loss, accuracy) records, where
    accuracy is the float model's own top-1 on the eval set.
    """
    from . import floatnet

    model = floatnet.init_float_model(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    images = np.asarray(train_images)
    if images.ndim == 3:
        images = images[..., np.newaxis]
    x_all = images.astype(np.float64) / 255.0
    labels = np.asarray(train_labels)
    param_names = ("conv1_w", "conv1_b", "dw_w", "dw_b", "conv2_w", "conv2_b",
                   "dense_w", "dense_b")
    history: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        # Halve the step size each epoch after the second so the weights
        # settle instead of orbiting the optimum.
        lr = cfg.learning_rate * 0.5 ** max(0, epoch - 1)
        order = rng.permutation(x_all.shape[0])
        losses = []
        for start in range(0, x_all.shape[0], cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            cache = _float_forward_cache(model, x_all[sel])
            n = sel.shape[0]
            logits = cache["logits"]
            shiftedl = logits - logits.max(axis=1, keepdims=True)
            exp = np.exp(shiftedl)
            probs = exp / exp.sum(axis=1, keepdims=True)
            loss = float(-np.mean(np.log(
                probs[np.arange(n), labels[sel]] + np.finfo(np.float64).tiny)))
            grad = probs
            grad[np.arange(n), labels[sel]] -= 1.0
            grad /= n
            grads = _float_backward(model, cache, grad)
            for name in param_names:
                setattr(model, name,
                        getattr(model, name) - lr * grads[name])
            losses.append(loss)
        accuracy = math.nan
        if eval_images is not None:
            accuracy = float_accuracy(model, eval_images, eval_labels)
        history.append(EpochRecord(epoch=epoch + 1,
                                   loss=float(np.mean(losses)) if losses else math.nan,
                                   accuracy=accuracy))
    return model, history


def float_accuracy(model, images_u8: np.ndarray, labels: np.ndarray,
                   batch_size: int = 512) -> float:
    """Top-1 accuracy of the float network on uint8 images, in percent."""
    from . import floatnet

    images = np.asarray(images_u8)
    if images.ndim == 3:
        images = images[..., np.newaxis]
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size].astype(np.float64) / 255.0
        logits = floatnet.forward(model, chunk)
        hits += int(np.sum(np.argmax(logits, axis=1) ==
                           labels[start : start + batch_size]))
    return 100.0 * hits / images.shape[0]
