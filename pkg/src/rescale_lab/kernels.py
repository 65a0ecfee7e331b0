"""Integer-only inference kernels.

All layer arithmetic happens on integers: int8 tensors in, a 32-bit
accumulator per output element, then a dyadic rescale back to int8.
The multiply-accumulate stage runs through float64 matmuls for speed;
that is exact because every partial sum is an integer bounded by the
no-overflow envelope (N * 127 * 255 + |bias|, far below 2**53).  The
rescaling stage runs in int64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import OverflowEnvelopeError, ShapeError
from .qcore import (
    INT8_MAX,
    INT8_MIN,
    INT32_MAX,
    INT32_MIN,
    DyadicRescaler,
    QuantParams,
    quantize_rescaler,
)

if TYPE_CHECKING:  # pragma: no cover
    from .model_io import LayerSpec, ModelGraph

# A layer may accumulate at most this many products per output element;
# together with int8 operand bounds it keeps |acc| < 2**31.
MAX_MAC_COUNT = 1 << 16


@dataclass
class QTensor:
    """An int8 tensor plus its quantization parameters.

    Activations carry a per-tensor :class:`QuantParams`.  Weights carry a
    float64 vector of per-channel scales (zero point 0, symmetric): one
    scale per output channel, which is axis 0 for dense ``(out, in)`` and
    conv ``(out, kh, kw, in)`` weights and the last axis for depthwise
    ``(kh, kw, channels)`` weights.
    """

    data: np.ndarray
    qparams: QuantParams | np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.dtype != np.int8:
            raise ShapeError(f"QTensor data must be int8, got {self.data.dtype}")
        if isinstance(self.qparams, QuantParams):
            return
        scales = np.asarray(self.qparams, dtype=np.float64)
        if scales.ndim != 1:
            raise ShapeError("per-channel scales must be a 1-D vector")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0.0):
            raise ShapeError("per-channel scales must be finite and positive")
        expected = channel_count(self.data)
        if scales.shape[0] != expected:
            raise ShapeError(
                f"{scales.shape[0]} scales for {expected} output channels"
            )
        self.qparams = scales

    @property
    def zero_point(self) -> int:
        if isinstance(self.qparams, QuantParams):
            return self.qparams.zero_point
        return 0  # per-channel weights are symmetric

    @property
    def is_per_channel(self) -> bool:
        return not isinstance(self.qparams, QuantParams)


def channel_count(weights: np.ndarray) -> int:
    """Output-channel count by weight rank: dense (out, in), conv OHWI,
    depthwise (kh, kw, channels)."""
    if weights.ndim in (2, 4):
        return weights.shape[0]
    if weights.ndim == 3:
        return weights.shape[-1]
    raise ShapeError(f"unsupported weight rank {weights.ndim}")


def quantize_real(values: np.ndarray, params: QuantParams) -> np.ndarray:
    """Quantize real values to int8: round-half-up of value/scale, plus the
    zero point, clamped."""
    q = np.floor(np.asarray(values, dtype=np.float64) / params.scale + 0.5)
    q += params.zero_point
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


def dequantize_real(q: np.ndarray, params: QuantParams) -> np.ndarray:
    """Map int8 values back to reals: ``scale * (q - zero_point)``."""
    return params.scale * (np.asarray(q, dtype=np.float64) - params.zero_point)


def compute_effective_bias(
    bias: np.ndarray, weights: QTensor | np.ndarray, z_in: int
) -> np.ndarray:
    """Fold the input zero point into the bias.

    ``b_eff[c] = bias[c] - z_in * sum(weights of channel c)``; with the input
    padded by ``z_in`` this makes every accumulator equal the zero-corrected
    sum regardless of position.  Raises ``OverflowError`` if a component
    leaves int32 instead of wrapping.
    """
    w = weights.data if isinstance(weights, QTensor) else np.asarray(weights)
    bias = np.asarray(bias)
    if bias.ndim != 1 or bias.shape[0] != channel_count(w):
        raise ShapeError(
            f"bias shape {bias.shape} does not match {channel_count(w)} channels"
        )
    w64 = w.astype(np.int64)
    if w.ndim == 2:
        tap_sum = w64.sum(axis=1)
    elif w.ndim == 4:
        tap_sum = w64.sum(axis=(1, 2, 3))
    else:
        tap_sum = w64.sum(axis=(0, 1))
    b_eff = bias.astype(np.int64) - np.int64(z_in) * tap_sum
    if np.any(b_eff < INT32_MIN) or np.any(b_eff > INT32_MAX):
        raise OverflowError("effective bias leaves the int32 range")
    return b_eff.astype(np.int32)


def _same_padding(in_size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Return (out_size, pad_before, pad_after) for SAME padding."""
    out_size = -(-in_size // stride)  # ceil
    total = max((out_size - 1) * stride + k - in_size, 0)
    return out_size, total // 2, total - total // 2


def _pad_nhwc(x: np.ndarray, pads: tuple[int, int, int, int], value: int) -> np.ndarray:
    top, bottom, left, right = pads
    if top == bottom == left == right == 0:
        return x
    return np.pad(
        x, ((0, 0), (top, bottom), (left, right), (0, 0)), constant_values=value
    )


def _check_acc(acc: np.ndarray) -> np.ndarray:
    """Verify accumulators stayed inside int32 and narrow the dtype."""
    if np.any(acc < INT32_MIN) or np.any(acc > INT32_MAX):
        raise OverflowEnvelopeError("accumulator left the int32 envelope")
    return acc.astype(np.int32)


def dense_int(x: QTensor, w: QTensor, b_eff: np.ndarray) -> np.ndarray:
    """Integer dense layer: returns the int32 accumulator ``x @ w.T + b_eff``."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("dense expects x (n, d) and weights (out, d)")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"dense feature mismatch: x has {x.data.shape[1]}, w has {w.data.shape[1]}"
        )
    if w.data.shape[1] > MAX_MAC_COUNT:
        raise ShapeError(f"MAC count {w.data.shape[1]} exceeds {MAX_MAC_COUNT}")
    acc = x.data.astype(np.float64) @ w.data.astype(np.float64).T
    acc = acc.astype(np.int64) + b_eff.astype(np.int64)
    return _check_acc(acc)


def _conv_geometry(x_shape, k_h, k_w, stride, padding):
    _, in_h, in_w, _ = x_shape
    s_h, s_w = stride
    if padding == "SAME":
        out_h, pad_t, pad_b = _same_padding(in_h, k_h, s_h)
        out_w, pad_l, pad_r = _same_padding(in_w, k_w, s_w)
    elif padding == "VALID":
        if in_h < k_h or in_w < k_w:
            raise ShapeError("input smaller than kernel under VALID padding")
        out_h = (in_h - k_h) // s_h + 1
        out_w = (in_w - k_w) // s_w + 1
        pad_t = pad_b = pad_l = pad_r = 0
    else:
        raise ShapeError(f"unknown padding {padding!r}")
    return out_h, out_w, (pad_t, pad_b, pad_l, pad_r)


def _patches(x_pad: np.ndarray, k_h: int, k_w: int, s_h: int, s_w: int) -> np.ndarray:
    """Sliding windows of a padded NHWC tensor: (n, oh, ow, c, kh, kw)."""
    win = sliding_window_view(x_pad, (k_h, k_w), axis=(1, 2))
    return win[:, ::s_h, ::s_w]


def conv2d_int(
    x: QTensor,
    w: QTensor,
    b_eff: np.ndarray,
    stride: tuple[int, int] = (1, 1),
    padding: str = "VALID",
) -> np.ndarray:
    """Integer 2-D convolution (cross-correlation), NHWC x OHWI -> int32 acc.

    SAME padding fills with the input zero point, which contributes nothing
    once the effective bias is in place.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x (n, h, w, c) and weights (o, kh, kw, c)")
    out_c, k_h, k_w, in_c = w.data.shape
    if x.data.shape[3] != in_c:
        raise ShapeError(
            f"conv2d channel mismatch: x has {x.data.shape[3]}, w has {in_c}"
        )
    if k_h * k_w * in_c > MAX_MAC_COUNT:
        raise ShapeError(f"MAC count {k_h * k_w * in_c} exceeds {MAX_MAC_COUNT}")
    out_h, out_w, pads = _conv_geometry(x.data.shape, k_h, k_w, stride, padding)
    x_pad = _pad_nhwc(x.data, pads, x.zero_point)
    cols = _patches(x_pad, k_h, k_w, *stride)  # (n, oh, ow, c, kh, kw)
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k_h * k_w * in_c)
    w2d = w.data.reshape(out_c, k_h * k_w * in_c)
    acc = cols.astype(np.float64) @ w2d.astype(np.float64).T
    acc = acc.astype(np.int64).reshape(x.data.shape[0], out_h, out_w, out_c)
    acc += b_eff.astype(np.int64)
    return _check_acc(acc)


def depthwise_conv2d_int(
    x: QTensor,
    w: QTensor,
    b_eff: np.ndarray,
    stride: tuple[int, int] = (1, 1),
    padding: str = "VALID",
) -> np.ndarray:
    """Integer depthwise convolution: each channel filtered independently
    with its (kh, kw) slice of the (kh, kw, channels) weights."""
    if x.data.ndim != 4 or w.data.ndim != 3:
        raise ShapeError("depthwise expects x (n, h, w, c) and weights (kh, kw, c)")
    k_h, k_w, channels = w.data.shape
    if x.data.shape[3] != channels:
        raise ShapeError(
            f"depthwise channel mismatch: x has {x.data.shape[3]}, w has {channels}"
        )
    if k_h * k_w > MAX_MAC_COUNT:
        raise ShapeError(f"MAC count {k_h * k_w} exceeds {MAX_MAC_COUNT}")
    out_h, out_w, pads = _conv_geometry(x.data.shape, k_h, k_w, stride, padding)
    x_pad = _pad_nhwc(x.data, pads, x.zero_point)
    cols = _patches(x_pad, k_h, k_w, *stride)  # (n, oh, ow, c, kh, kw)
    acc = np.einsum(
        "nhwckl,klc->nhwc", cols.astype(np.float64), w.data.astype(np.float64)
    )
    acc = acc.astype(np.int64) + b_eff.astype(np.int64)
    return _check_acc(acc)


def rescale_accumulator(
    acc: np.ndarray, m: np.ndarray, s: np.ndarray
) -> np.ndarray:
    """Vectorized round-half-up rescale of int32 accumulators by per-channel
    dyadic multipliers, saturated to int32.

    ``m`` and ``s`` broadcast against the trailing (channel) axis of ``acc``.
    The int64 intermediates cannot wrap: |acc| < 2**31 and m < 2**32.
    """
    acc64 = acc.astype(np.int64)
    m64 = np.asarray(m, dtype=np.int64)
    s64 = np.asarray(s, dtype=np.int64)
    rnd = np.left_shift(np.int64(1), s64 - 1)
    shifted = np.right_shift(acc64 * m64 + rnd, s64)
    return np.clip(shifted, INT32_MIN, INT32_MAX)


def activation_clamp(activation: str, out_params: QuantParams) -> tuple[int, int]:
    """Integer clamp bounds for an activation applied in the quantized domain.

    Real zero quantizes to the output zero point, so ReLU clamps there; the
    ReLU6 ceiling is the quantized image of 6.0, saturated to int8.
    """
    z = out_params.zero_point
    if activation == "none":
        return INT8_MIN, INT8_MAX
    if activation == "relu":
        return z, INT8_MAX
    if activation == "relu6":
        hi = math.floor(6.0 / out_params.scale + 0.5) + z
        return z, max(INT8_MIN, min(INT8_MAX, hi))
    raise ShapeError(f"unknown activation {activation!r}")


def avgpool_int(x: QTensor, window: tuple[int, int], k: int) -> QTensor:
    """Average pooling: window sum rescaled by a k-bit dyadic encoding of
    1/(window area).  Quantization parameters pass through unchanged."""
    rescaler = quantize_rescaler(1.0 / (window[0] * window[1]), k)
    return _avgpool_with_rescaler(x, window, rescaler)


def _avgpool_with_rescaler(
    x: QTensor, window: tuple[int, int], rescaler: DyadicRescaler
) -> QTensor:
    if x.data.ndim != 4:
        raise ShapeError("avgpool expects x (n, h, w, c)")
    n, in_h, in_w, c = x.data.shape
    w_h, w_w = window
    if in_h % w_h or in_w % w_w:
        raise ShapeError(f"input {in_h}x{in_w} not divisible by window {w_h}x{w_w}")
    sums = (
        x.data.astype(np.int64)
        .reshape(n, in_h // w_h, w_h, in_w // w_w, w_w, c)
        .sum(axis=(2, 4))
    )
    out = rescale_accumulator(sums, rescaler.m, rescaler.s)
    out = np.clip(out, INT8_MIN, INT8_MAX).astype(np.int8)
    return QTensor(out, x.qparams)


def layer_forward_int(x: QTensor, layer: "LayerSpec", k: int) -> QTensor:
    """Run one layer of the integer engine.

    The layer's rescalers must already be materialized at width ``k``;
    weighted layers end with rescale, zero-point add, and activation clamp.
    """
    if layer.kind == "flatten":
        return QTensor(x.data.reshape(x.data.shape[0], -1), x.qparams)
    for r in layer.rescalers:
        if r.k != k:
            raise ShapeError(f"layer rescaler width {r.k} does not match engine k={k}")
    if layer.kind == "avgpool":
        return _avgpool_with_rescaler(x, layer.window, layer.rescalers[0])
    z_in = x.zero_point
    b_eff = compute_effective_bias(layer.bias, layer.weights, z_in)
    if layer.kind == "dense":
        acc = dense_int(x, layer.weights, b_eff)
    elif layer.kind == "conv2d":
        acc = conv2d_int(x, layer.weights, b_eff, layer.stride, layer.padding)
    elif layer.kind == "depthwise":
        acc = depthwise_conv2d_int(x, layer.weights, b_eff, layer.stride, layer.padding)
    else:
        raise ShapeError(f"unknown layer kind {layer.kind!r}")
    m = np.array([r.m for r in layer.rescalers], dtype=np.int64)
    s = np.array([r.s for r in layer.rescalers], dtype=np.int64)
    shifted = rescale_accumulator(acc, m, s)
    lo, hi = activation_clamp(layer.activation, layer.output)
    out = np.clip(shifted + layer.output.zero_point, lo, hi).astype(np.int8)
    return QTensor(out, layer.output)


def run_model_int(model: "ModelGraph", x_q: np.ndarray) -> np.ndarray:
    """Run the integer engine over a pre-quantized int8 input batch and
    return the int8 logits."""
    tensor = QTensor(np.asarray(x_q, dtype=np.int8), model.input_params)
    for layer in model.layers:
        tensor = layer_forward_int(tensor, layer, model.k)
    return tensor.data


def predict_int(model: "ModelGraph", images_u8: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Classify uint8 images: scale to [0, 1], quantize with the model's
    input parameters, run the engine, argmax (ties to the lowest index)."""
    images = np.asarray(images_u8)
    if images.ndim == 3:
        images = images[..., np.newaxis]
    preds = []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size].astype(np.float64) / 255.0
        x_q = quantize_real(chunk, model.input_params)
        logits = run_model_int(model, x_q)
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_int(
    model: "ModelGraph",
    images_u8: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 512,
) -> float:
    """Top-1 accuracy of the integer engine on a labeled image set, in percent."""
    preds = predict_int(model, images_u8, batch_size=batch_size)
    return 100.0 * float(np.mean(preds == np.asarray(labels)))
