"""Model container, post-training quantization, redeployment, datasets.

The on-disk container ("RQM1") is a single file:

    8 bytes   magic  b"RQM1\\0\\0\\0\\0"
    8 bytes   little-endian u64: manifest byte length
    manifest  UTF-8 JSON (topology, shapes, scales, rescalers, blob layout)
    8 bytes   little-endian u64: blob byte length
    blob      raw little-endian tensor data in manifest order

Scales and other real-valued fields are serialized as 16-hex-digit
binary64 bit patterns so round-trips are bit-exact in any language.
The manifest also carries a CRC-32 of the blob so corrupted tensor
bytes are detected at load time.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import floatnet
from .errors import CalibrationError, DomainError, FormatError, RescalerUnderflow, ShapeError
from .kernels import QTensor, channel_count, compute_effective_bias
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
    from .trainer import ShadowModel

MAGIC = b"RQM1\x00\x00\x00\x00"
FORMAT_VERSION = 1

# Quantization grid sizes of the int8 scheme.
_ACT_LEVELS = 255.0
_WEIGHT_LEVELS = 127.0
_SCALE_FLOOR = 1e-7

WEIGHTED_KINDS = ("dense", "conv2d", "depthwise")
LAYER_KINDS = WEIGHTED_KINDS + ("avgpool", "flatten")


# ---------------------------------------------------------------------------
# Graph types
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """One layer of a quantized model."""

    kind: str
    activation: str = "none"
    weights: QTensor | None = None
    bias: np.ndarray | None = None
    bias_scales: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: str = "VALID"
    window: tuple[int, int] | None = None
    output: QuantParams | None = None
    rescalers: list[DyadicRescaler] = field(default_factory=list)


@dataclass
class ModelGraph:
    """Ordered quantized layers plus input quantization and metadata."""

    name: str
    input_params: QuantParams
    layers: list[LayerSpec]
    k: int


@dataclass
class CalibrationStats:
    """Running per-tensor min/max over a calibration set."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def update(self, name: str, values: np.ndarray) -> None:
        lo = float(np.min(values))
        hi = float(np.max(values))
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise CalibrationError(f"non-finite values observed for tensor {name!r}")
        if name in self.ranges:
            old_lo, old_hi = self.ranges[name]
            lo, hi = min(lo, old_lo), max(hi, old_hi)
        self.ranges[name] = (lo, hi)

    def range_of(self, name: str) -> tuple[float, float]:
        return self.ranges[name]


def round_half_up(values: np.ndarray) -> np.ndarray:
    """Elementwise round-half-up toward +inf, the engine's convention."""
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


# ---------------------------------------------------------------------------
# Post-training quantization
# ---------------------------------------------------------------------------


def activation_qparams(lo: float, hi: float) -> QuantParams:
    """Affine int8 parameters covering the observed range [lo, hi].

    A degenerate range (hi == lo, to within the 1e-7 scale floor) falls back
    to scale 1e-7 with zero point 0.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise CalibrationError(f"non-finite activation range [{lo}, {hi}]")
    if hi < lo:
        raise CalibrationError(f"inverted activation range [{lo}, {hi}]")
    scale = (hi - lo) / _ACT_LEVELS
    if scale < _SCALE_FLOOR:
        return QuantParams(scale=_SCALE_FLOOR, zero_point=0)
    zero_point = int(np.floor(-128.0 - lo / scale + 0.5))
    zero_point = max(INT8_MIN, min(INT8_MAX, zero_point))
    return QuantParams(scale=scale, zero_point=zero_point)


def weight_channel_scales(w: np.ndarray, channel_axis: int) -> np.ndarray:
    """Symmetric per-channel scales max|w_c| / 127, floored at 1e-7."""
    axes = tuple(a for a in range(w.ndim) if a != channel_axis)
    peak = np.max(np.abs(w), axis=axes)
    return np.maximum(peak / _WEIGHT_LEVELS, _SCALE_FLOOR)


def quantize_weights(w: np.ndarray, channel_axis: int) -> QTensor:
    """Per-channel symmetric int8 weights (channel scales, zero point 0)."""
    scales = weight_channel_scales(w, channel_axis)
    shape = [1] * w.ndim
    shape[channel_axis] = -1
    ints = round_half_up(w / scales.reshape(shape))
    ints = np.clip(ints, -127, 127).astype(np.int8)
    # Weight QTensors key their scale vector to the output-channel axis the
    # kernels expect; reorder is only needed if callers pass exotic layouts.
    return QTensor(ints, scales)


def quantize_bias(b: np.ndarray, bias_scales: np.ndarray) -> np.ndarray:
    ints = round_half_up(np.asarray(b, dtype=np.float64) / bias_scales)
    return np.clip(ints, INT32_MIN, INT32_MAX).astype(np.int32)


def _build_rescalers(
    in_scale: float, weight_scales: np.ndarray, out_scale: float, k: int
) -> list[DyadicRescaler]:
    rescalers = []
    for c, w_scale in enumerate(weight_scales):
        m_real = in_scale * float(w_scale) / out_scale
        if not 0.0 < m_real <= 1.0:
            raise DomainError(
                f"channel {c}: rescale factor {m_real!r} outside (0, 1]; "
                "the accumulator scale must not exceed the output scale"
            )
        rescalers.append(quantize_rescaler(m_real, k))
    return rescalers


def quantize_float_model(
    float_model: "floatnet.FloatModel",
    calibration_batches: Iterable[np.ndarray],
    name: str = floatnet.ARCH_NAME,
) -> ModelGraph:
    """Post-training quantization of the reference float network.

    Runs the calibration batches through the float model recording min/max
    per tensor, derives affine activation parameters and symmetric
    per-channel weight parameters, quantizes biases at S_x * S_w_c, and
    materializes per-channel rescalers M_c = S_x * S_w_c / S_y at k=32.
    """
    if isinstance(calibration_batches, np.ndarray):
        calibration_batches = [calibration_batches]
    batches = [np.asarray(b, dtype=np.float64) for b in calibration_batches]
    if not batches:
        raise CalibrationError("at least one calibration batch is required")
    stats = CalibrationStats()
    for batch in batches:
        tensors = floatnet.forward_intermediates(float_model, batch)
        for key in ("input", "conv1", "dw", "conv2", "logits"):
            stats.update(key, tensors[key])

    input_params = activation_qparams(*stats.range_of("input"))
    qp_conv1 = activation_qparams(*stats.range_of("conv1"))
    qp_dw = activation_qparams(*stats.range_of("dw"))
    qp_conv2 = activation_qparams(*stats.range_of("conv2"))
    qp_logits = activation_qparams(*stats.range_of("logits"))

    def weighted_layer(kind, w_real, b_real, channel_axis, in_qp, out_qp,
                       activation, stride=(1, 1), padding="VALID"):
        weights = quantize_weights(w_real, channel_axis)
        bias_scales = in_qp.scale * np.asarray(weights.qparams, dtype=np.float64)
        return LayerSpec(
            kind=kind,
            activation=activation,
            weights=weights,
            bias=quantize_bias(b_real, bias_scales),
            bias_scales=bias_scales,
            stride=stride,
            padding=padding,
            output=out_qp,
            rescalers=_build_rescalers(in_qp.scale, weights.qparams, out_qp.scale, 32),
        )

    pool_rescaler = quantize_rescaler(0.25, 32)
    layers = [
        weighted_layer("conv2d", float_model.conv1_w, float_model.conv1_b, 0,
                       input_params, qp_conv1, "relu6", (1, 1), "SAME"),
        LayerSpec(kind="avgpool", window=(2, 2), output=qp_conv1,
                  rescalers=[pool_rescaler]),
        weighted_layer("depthwise", float_model.dw_w, float_model.dw_b, 2,
                       qp_conv1, qp_dw, "relu6", (1, 1), "SAME"),
        weighted_layer("conv2d", float_model.conv2_w, float_model.conv2_b, 0,
                       qp_dw, qp_conv2, "relu6", (1, 1), "VALID"),
        LayerSpec(kind="avgpool", window=(2, 2), output=qp_conv2,
                  rescalers=[pool_rescaler]),
        LayerSpec(kind="flatten", output=qp_conv2),
        weighted_layer("dense", float_model.dense_w, float_model.dense_b, 0,
                       qp_conv2, qp_logits, "none"),
    ]
    model = ModelGraph(name=name, input_params=input_params, layers=layers, k=32)
    validate_model(model)
    return model


def materialize_rescalers(model: ModelGraph, k: int) -> ModelGraph:
    """Re-quantize every rescaler at width ``k`` from its stored real value."""
    new_layers = []
    for idx, layer in enumerate(model.layers):
        rescalers = []
        for c, r in enumerate(layer.rescalers):
            try:
                rescalers.append(quantize_rescaler(r.real_value, k))
            except RescalerUnderflow as exc:
                raise RescalerUnderflow(
                    f"layer {idx} ({layer.kind}) channel {c}: {exc}"
                ) from exc
        new_layers.append(replace(layer, rescalers=rescalers))
    return ModelGraph(
        name=model.name, input_params=model.input_params, layers=new_layers, k=k
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _layer_input_params(model: ModelGraph, index: int) -> QuantParams:
    return model.input_params if index == 0 else model.layers[index - 1].output


def validate_model(model: ModelGraph) -> None:
    """Re-check every structural invariant; raises ShapeError/DomainError."""
    if not model.layers:
        raise ShapeError("model has no layers")
    if not isinstance(model.input_params, QuantParams):
        raise ShapeError("model input parameters missing")
    for idx, layer in enumerate(model.layers):
        in_params = _layer_input_params(model, idx)
        if layer.kind not in LAYER_KINDS:
            raise ShapeError(f"layer {idx}: unknown kind {layer.kind!r}")
        if layer.output is None:
            raise ShapeError(f"layer {idx}: missing output parameters")
        if layer.kind in WEIGHTED_KINDS:
            _validate_weighted(layer, idx, in_params, model.k)
        elif layer.kind == "avgpool":
            if layer.window is None or min(layer.window) < 1:
                raise ShapeError(f"layer {idx}: avgpool needs a window")
            if len(layer.rescalers) != 1:
                raise ShapeError(f"layer {idx}: avgpool needs exactly one rescaler")
            area = layer.window[0] * layer.window[1]
            if layer.rescalers[0].real_value != 1.0 / area:
                raise ShapeError(f"layer {idx}: avgpool rescaler is not 1/area")
            if layer.rescalers[0].k != model.k:
                raise ShapeError(f"layer {idx}: rescaler width != model k")
            if layer.output != in_params:
                raise ShapeError(f"layer {idx}: avgpool must keep qparams")
        else:  # flatten
            if layer.rescalers:
                raise ShapeError(f"layer {idx}: flatten takes no rescalers")
            if layer.output != in_params:
                raise ShapeError(f"layer {idx}: flatten must keep qparams")


def _validate_weighted(layer: LayerSpec, idx: int, in_params: QuantParams, k: int) -> None:
    if layer.weights is None or layer.bias is None or layer.bias_scales is None:
        raise ShapeError(f"layer {idx}: weighted layer missing weights or bias")
    if not layer.weights.is_per_channel:
        raise ShapeError(f"layer {idx}: weights must carry per-channel scales")
    channels = channel_count(layer.weights.data)
    if layer.bias.shape != (channels,) or layer.bias_scales.shape != (channels,):
        raise ShapeError(f"layer {idx}: bias shape does not match {channels} channels")
    if len(layer.rescalers) != channels:
        raise ShapeError(f"layer {idx}: {len(layer.rescalers)} rescalers "
                         f"for {channels} channels")
    w_scales = np.asarray(layer.weights.qparams, dtype=np.float64)
    expected_bias_scales = in_params.scale * w_scales
    if not np.array_equal(layer.bias_scales, expected_bias_scales):
        raise ShapeError(
            f"layer {idx}: bias scales differ from input-scale x weight-scale"
        )
    out_scale = layer.output.scale
    for c, r in enumerate(layer.rescalers):
        r.validate()
        if r.k != k:
            raise ShapeError(f"layer {idx} channel {c}: rescaler width {r.k} != model k {k}")
        expected_m = in_params.scale * float(w_scales[c]) / out_scale
        if r.real_value != expected_m:
            raise ShapeError(
                f"layer {idx} channel {c}: stored rescale factor "
                f"{r.real_value!r} != S_x*S_w/S_y {expected_m!r}"
            )
    # No-overflow envelope: |acc| <= N * 127 * 255 + |b_q| must fit int32.
    w = layer.weights.data
    mac_count = w.shape[1] if w.ndim == 2 else (
        w.shape[0] * w.shape[1] if w.ndim == 3 else w.shape[1] * w.shape[2] * w.shape[3]
    )
    if mac_count > (1 << 16):
        raise ShapeError(f"layer {idx}: MAC count {mac_count} exceeds 2^16")
    worst = mac_count * 127 * 255 + int(np.max(np.abs(layer.bias.astype(np.int64))))
    if worst >= (1 << 31):
        raise ShapeError(f"layer {idx}: worst-case accumulator {worst} leaves int32")
    # Confirm the effective bias itself stays in range for this input zero point.
    compute_effective_bias(layer.bias, layer.weights, in_params.zero_point)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def float_to_hex(value: float) -> str:
    return struct.pack(">d", float(value)).hex()


def hex_to_float(text: str) -> float:
    if not isinstance(text, str) or len(text) != 16:
        raise FormatError(f"bad binary64 hex field {text!r}")
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise FormatError(f"bad binary64 hex field {text!r}") from exc
    return struct.unpack(">d", raw)[0]


def _qparams_to_json(qp: QuantParams) -> dict:
    return {"scale": float_to_hex(qp.scale), "zero_point": qp.zero_point}


def _qparams_from_json(obj: dict, where: str) -> QuantParams:
    try:
        return QuantParams(
            scale=hex_to_float(obj["scale"]), zero_point=int(obj["zero_point"])
        )
    except (KeyError, TypeError, DomainError) as exc:
        raise FormatError(f"{where}: bad quantization parameters ({exc})") from exc


def _canonical_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_to_bytes(model: ModelGraph) -> bytes:
    """Serialize to the RQM1 container (deterministic bytes)."""
    blob = bytearray()
    layers_json = []
    for idx, layer in enumerate(model.layers):
        entry: dict = {
            "kind": layer.kind,
            "activation": layer.activation,
            "output": _qparams_to_json(layer.output),
            "rescalers": [
                {
                    "m": r.m,
                    "s": r.s,
                    "k": r.k,
                    "real": float_to_hex(r.real_value),
                    "underflowed": r.underflowed,
                }
                for r in layer.rescalers
            ],
        }
        if layer.kind in WEIGHTED_KINDS:
            entry["stride"] = list(layer.stride)
            entry["padding"] = layer.padding
            entry["weight_scales"] = [
                float_to_hex(v) for v in np.asarray(layer.weights.qparams)
            ]
            entry["bias_scales"] = [float_to_hex(v) for v in layer.bias_scales]
            w_bytes = np.ascontiguousarray(layer.weights.data, dtype=np.int8).tobytes()
            b_bytes = layer.bias.astype("<i4").tobytes()
            entry["tensors"] = {
                "weights": {
                    "dtype": "int8",
                    "shape": list(layer.weights.data.shape),
                    "offset": len(blob),
                    "size": len(w_bytes),
                },
                "bias": {
                    "dtype": "int32",
                    "shape": list(layer.bias.shape),
                    "offset": len(blob) + len(w_bytes),
                    "size": len(b_bytes),
                },
            }
            blob.extend(w_bytes)
            blob.extend(b_bytes)
        elif layer.kind == "avgpool":
            entry["window"] = list(layer.window)
        layers_json.append(entry)
    manifest = {
        "format": "rqm1",
        "version": FORMAT_VERSION,
        "name": model.name,
        "k": model.k,
        "input": _qparams_to_json(model.input_params),
        "layers": layers_json,
        "blob_crc32": zlib.crc32(bytes(blob)),
    }
    # The manifest checksum covers the canonical serialization of every other
    # manifest field, so no header byte can change without detection.
    manifest["manifest_crc32"] = zlib.crc32(_canonical_json(manifest))
    manifest_bytes = _canonical_json(manifest)
    out = bytearray()
    out.extend(MAGIC)
    out.extend(struct.pack("<Q", len(manifest_bytes)))
    out.extend(manifest_bytes)
    out.extend(struct.pack("<Q", len(blob)))
    out.extend(blob)
    return bytes(out)


def _read_tensor(blob: bytes, meta: dict, dtype: str, where: str) -> np.ndarray:
    try:
        shape = tuple(int(v) for v in meta["shape"])
        offset = int(meta["offset"])
        size = int(meta["size"])
        declared_dtype = meta["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: malformed tensor entry ({exc})") from exc
    if declared_dtype != dtype:
        raise FormatError(f"{where}: expected dtype {dtype}, got {declared_dtype!r}")
    itemsize = 1 if dtype == "int8" else 4
    expected_size = int(np.prod(shape)) * itemsize if shape else itemsize
    if size != expected_size:
        raise FormatError(
            f"{where}: size {size} does not match shape {shape} ({expected_size})"
        )
    if offset < 0 or offset + size > len(blob):
        raise FormatError(
            f"{where}: tensor bytes [{offset}, {offset + size}) leave the blob "
            f"of {len(blob)} bytes"
        )
    raw = blob[offset : offset + size]
    if dtype == "int8":
        return np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
    return np.frombuffer(raw, dtype="<i4").astype(np.int32).reshape(shape).copy()


def model_from_bytes(data: bytes) -> ModelGraph:
    """Parse and fully re-validate an RQM1 container."""
    if len(data) < 16:
        raise FormatError(f"truncated header: {len(data)} bytes, need at least 16")
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r} at byte 0")
    (manifest_len,) = struct.unpack("<Q", data[8:16])
    manifest_end = 16 + manifest_len
    if manifest_end + 8 > len(data):
        raise FormatError(
            f"manifest length {manifest_len} at byte 8 leaves the file of "
            f"{len(data)} bytes"
        )
    try:
        manifest = json.loads(data[16:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest at byte 16 is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest is not a JSON object")
    (blob_len,) = struct.unpack("<Q", data[manifest_end : manifest_end + 8])
    blob_start = manifest_end + 8
    if blob_start + blob_len != len(data):
        raise FormatError(
            f"blob length {blob_len} at byte {manifest_end} does not match "
            f"the {len(data) - blob_start} bytes present"
        )
    blob = data[blob_start : blob_start + blob_len]
    try:
        if manifest["format"] != "rqm1" or manifest["version"] != FORMAT_VERSION:
            raise FormatError(
                f"unsupported format {manifest.get('format')!r} "
                f"version {manifest.get('version')!r}"
            )
        stored_crc = manifest.pop("manifest_crc32", None)
        if stored_crc != zlib.crc32(_canonical_json(manifest)):
            raise FormatError("manifest checksum mismatch: header corrupted")
        if manifest["blob_crc32"] != zlib.crc32(blob):
            raise FormatError("blob checksum mismatch: tensor data corrupted")
        name = manifest["name"]
        k = int(manifest["k"])
        input_params = _qparams_from_json(manifest["input"], "input")
        layer_entries = manifest["layers"]
        if not isinstance(layer_entries, list):
            raise FormatError("manifest 'layers' is not a list")
    except KeyError as exc:
        raise FormatError(f"manifest missing required key {exc}") from exc

    layers = []
    for idx, entry in enumerate(layer_entries):
        where = f"layer {idx}"
        try:
            layers.append(_layer_from_json(entry, blob, where))
        except FormatError:
            raise
        except (KeyError, TypeError, ValueError, DomainError, ShapeError) as exc:
            raise FormatError(f"{where}: {exc}") from exc
    model = ModelGraph(name=name, input_params=input_params, layers=layers, k=k)
    try:
        validate_model(model)
    except (DomainError, ShapeError, OverflowError) as exc:
        raise FormatError(f"model fails validation: {exc}") from exc
    return model


def _layer_from_json(entry: dict, blob: bytes, where: str) -> LayerSpec:
    kind = entry["kind"]
    if kind not in LAYER_KINDS:
        raise FormatError(f"{where}: unknown kind {kind!r}")
    output = _qparams_from_json(entry["output"], where)
    rescalers = []
    for c, robj in enumerate(entry["rescalers"]):
        rescaler = DyadicRescaler(
            m=int(robj["m"]),
            s=int(robj["s"]),
            k=int(robj["k"]),
            real_value=hex_to_float(robj["real"]),
            underflowed=bool(robj.get("underflowed", False)),
        )
        try:
            rescaler.validate()
        except DomainError as exc:
            raise FormatError(f"{where} rescaler {c}: {exc}") from exc
        rescalers.append(rescaler)
    spec = LayerSpec(kind=kind, activation=entry.get("activation", "none"),
                     output=output, rescalers=rescalers)
    if kind in WEIGHTED_KINDS:
        stride = entry["stride"]
        spec.stride = (int(stride[0]), int(stride[1]))
        spec.padding = entry["padding"]
        if spec.padding not in ("SAME", "VALID"):
            raise FormatError(f"{where}: unknown padding {spec.padding!r}")
        w_scales = np.array([hex_to_float(v) for v in entry["weight_scales"]])
        w_data = _read_tensor(blob, entry["tensors"]["weights"], "int8",
                              f"{where} tensor 'weights'")
        spec.weights = QTensor(w_data, w_scales)
        spec.bias = _read_tensor(blob, entry["tensors"]["bias"], "int32",
                                 f"{where} tensor 'bias'")
        spec.bias_scales = np.array([hex_to_float(v) for v in entry["bias_scales"]])
    elif kind == "avgpool":
        window = entry["window"]
        spec.window = (int(window[0]), int(window[1]))
    return spec


def save_model(model: ModelGraph, path: str) -> None:
    data = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def load_model(path: str) -> ModelGraph:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return model_from_bytes(data)


def models_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Structural equality (used by tests and the zero-epoch guarantees)."""
    return model_to_bytes(a) == model_to_bytes(b)


# ---------------------------------------------------------------------------
# Redeployment
# ---------------------------------------------------------------------------


def redeploy_weights(model: ModelGraph, shadow: "ShadowModel") -> ModelGraph:
    """Substitute rounded shadow weights into a copy of the model.

    Weights round half-up and clamp to [-128, 127]; biases round half-up and
    clamp to int32.  Scales, zero points, and rescalers are untouched.
    """
    if len(shadow.weights) != len(model.layers):
        raise ShapeError("shadow layer count does not match the model")
    new_layers = []
    for idx, layer in enumerate(model.layers):
        shadow_w = shadow.weights[idx]
        shadow_b = shadow.biases[idx]
        if layer.kind not in WEIGHTED_KINDS:
            if shadow_w is not None:
                raise ShapeError(f"layer {idx}: unexpected shadow weights")
            new_layers.append(replace(layer))
            continue
        if shadow_w is None or shadow_b is None:
            raise ShapeError(f"layer {idx}: missing shadow tensors")
        if shadow_w.shape != layer.weights.data.shape:
            raise ShapeError(
                f"layer {idx}: shadow weights {shadow_w.shape} vs "
                f"{layer.weights.data.shape}"
            )
        if shadow_b.shape != layer.bias.shape:
            raise ShapeError(f"layer {idx}: shadow bias shape mismatch")
        w_int = np.clip(round_half_up(shadow_w), INT8_MIN, INT8_MAX).astype(np.int8)
        b_int = np.clip(round_half_up(shadow_b), INT32_MIN, INT32_MAX).astype(np.int32)
        new_layers.append(
            replace(layer, weights=QTensor(w_int, layer.weights.qparams), bias=b_int)
        )
    return ModelGraph(
        name=model.name, input_params=model.input_params, layers=new_layers, k=model.k
    )


# ---------------------------------------------------------------------------
# IDX datasets
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path: str, magic: int, rank: int) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    header = 4 + 4 * rank
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    (got_magic,) = struct.unpack(">I", data[:4])
    if got_magic != magic:
        raise FormatError(
            f"{path}: IDX magic 0x{got_magic:08x}, expected 0x{magic:08x}"
        )
    dims = struct.unpack(f">{rank}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) != header + count:
        raise FormatError(
            f"{path}: {len(data) - header} payload bytes for dimensions {dims}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_idx_dataset(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load a u8 image/label pair of IDX files (big-endian headers)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return images, labels


def save_idx_images(path: str, images_u8: np.ndarray) -> None:
    """Write a u8 image stack as an IDX file (big-endian header)."""
    images = np.ascontiguousarray(images_u8, dtype=np.uint8)
    if images.ndim != 3:
        raise ShapeError(f"expected images (n, h, w), got shape {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())


def save_idx_labels(path: str, labels: np.ndarray) -> None:
    """Write u8 class labels as an IDX file (big-endian header)."""
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ShapeError(f"expected labels (n,), got shape {labels.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())
