"""Real-valued reference network.

The fixed desk-scale architecture "desk-cnn-v1" used for baselines:

    input 28x28x1
    -> conv2d 3x3x8, stride 1, SAME, ReLU6
    -> avgpool 2x2
    -> depthwise 3x3, SAME, ReLU6
    -> conv2d 1x1x16, ReLU6
    -> avgpool 2x2
    -> flatten
    -> dense 10

Forward passes run in float64.  The quantizer consumes the per-tensor
intermediates this module exposes; the trainer adds the backward pass.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, fields

import numpy as np

from .errors import FormatError
from .kernels import _conv_geometry, _pad_nhwc, _patches

ARCH_NAME = "desk-cnn-v1"
INPUT_SHAPE = (28, 28, 1)
NUM_CLASSES = 10

_FLOAT_MAGIC = "rescale-lab-float-v1"


@dataclass
class FloatModel:
    """Parameters of desk-cnn-v1 (conv weights OHWI, depthwise HWC)."""

    conv1_w: np.ndarray  # (8, 3, 3, 1)
    conv1_b: np.ndarray  # (8,)
    dw_w: np.ndarray     # (3, 3, 8)
    dw_b: np.ndarray     # (8,)
    conv2_w: np.ndarray  # (16, 1, 1, 8)
    conv2_b: np.ndarray  # (16,)
    dense_w: np.ndarray  # (10, 784)
    dense_b: np.ndarray  # (10,)


def init_float_model(seed: int) -> FloatModel:
    """He-style initialization, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return FloatModel(
        conv1_w=he((8, 3, 3, 1), 9),
        conv1_b=np.zeros(8),
        dw_w=he((3, 3, 8), 9),
        dw_b=np.zeros(8),
        conv2_w=he((16, 1, 1, 8), 8),
        conv2_b=np.zeros(16),
        dense_w=he((10, 784), 784),
        dense_b=np.zeros(10),
    )


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 6.0)


def conv2d_real(x, w, b, stride=(1, 1), padding="VALID"):
    """Float convolution, NHWC x OHWI; SAME pads with real zero."""
    out_c, k_h, k_w, in_c = w.shape
    out_h, out_w, pads = _conv_geometry(x.shape, k_h, k_w, stride, padding)
    x_pad = _pad_nhwc(x, pads, 0.0)
    cols = _patches(x_pad, k_h, k_w, *stride)
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k_h * k_w * in_c)
    out = cols @ w.reshape(out_c, -1).T + b
    return out.reshape(x.shape[0], out_h, out_w, out_c)


def depthwise_real(x, w, b, stride=(1, 1), padding="VALID"):
    """Float depthwise convolution, weights (kh, kw, channels)."""
    k_h, k_w, _ = w.shape
    out_h, out_w, pads = _conv_geometry(x.shape, k_h, k_w, stride, padding)
    x_pad = _pad_nhwc(x, pads, 0.0)
    cols = _patches(x_pad, k_h, k_w, *stride)  # (n, oh, ow, c, kh, kw)
    return np.einsum("nhwckl,klc->nhwc", cols, w) + b


def avgpool_real(x, window=(2, 2)):
    n, h, w, c = x.shape
    w_h, w_w = window
    return x.reshape(n, h // w_h, w_h, w // w_w, w_w, c).mean(axis=(2, 4))


def forward_intermediates(model: FloatModel, x: np.ndarray) -> dict[str, np.ndarray]:
    """Forward pass returning every tensor the quantizer calibrates on.

    Keys: ``input``, ``conv1``, ``pool1``, ``dw``, ``conv2``, ``pool2``,
    ``flat``, ``logits``; activation tensors are post-ReLU6.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., np.newaxis]
    a1 = relu6(conv2d_real(x, model.conv1_w, model.conv1_b, (1, 1), "SAME"))
    p1 = avgpool_real(a1)
    a2 = relu6(depthwise_real(p1, model.dw_w, model.dw_b, (1, 1), "SAME"))
    a3 = relu6(conv2d_real(a2, model.conv2_w, model.conv2_b, (1, 1), "VALID"))
    p2 = avgpool_real(a3)
    flat = p2.reshape(x.shape[0], -1)
    logits = flat @ model.dense_w.T + model.dense_b
    return {
        "input": x,
        "conv1": a1,
        "pool1": p1,
        "dw": a2,
        "conv2": a3,
        "pool2": p2,
        "flat": flat,
        "logits": logits,
    }


def forward(model: FloatModel, x: np.ndarray) -> np.ndarray:
    return forward_intermediates(model, x)["logits"]


def save_float_model(model: FloatModel, path: str) -> None:
    arrays = {f.name: getattr(model, f.name) for f in fields(FloatModel)}
    np.savez(path, magic=_FLOAT_MAGIC, **arrays)


def load_float_model(path: str) -> FloatModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            if "magic" not in data or str(data["magic"]) != _FLOAT_MAGIC:
                raise FormatError(f"{path}: not a rescale-lab float model")
            kwargs = {
                f.name: np.asarray(data[f.name], dtype=np.float64)
                for f in fields(FloatModel)
            }
    except (FormatError, FileNotFoundError):
        raise
    except (OSError, KeyError, ValueError, io.UnsupportedOperation) as exc:
        raise FormatError(f"{path}: cannot read float model ({exc})") from exc
    return FloatModel(**kwargs)


def arch_summary() -> str:
    """One-line architecture description used in logs and manifests."""
    spec = {
        "name": ARCH_NAME,
        "input": list(INPUT_SHAPE),
        "classes": NUM_CLASSES,
    }
    return json.dumps(spec, sort_keys=True)
