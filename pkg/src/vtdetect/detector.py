"""Two-stream fully-convolutional detector over visible/thermal image pairs.

Each modality passes through its own small conv stack; the stream features
are concatenated and fused by one more convolution.  Three 1x1 heads emit
per-pixel probability maps: a multispectral map from the fused features and
one auxiliary supervision map per stream.

Checkpoint format (binary, little-endian):

    magic    8 bytes  b"VTDETPRM"
    version  uint32   currently 1
    arch     uint32 length + UTF-8 JSON of the ArchConfig fields
    count    uint32   number of tensors
    per tensor:
        name   uint32 length + UTF-8 bytes
        ndim   uint32
        dims   uint32 * ndim
        data   float64 * prod(dims), row-major

Tensors are written in the order of `DetectorParams.named_tensors()`, which
is fixed, so serialization is byte-deterministic.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .tensor_ops import (
    ConvLayer,
    conv2d_backward,
    conv2d_forward_cols,
    downsample2x,
    downsample2x_backward,
    sigmoid,
    sigmoid_backward,
    tanh,
    tanh_backward,
    upsample_bilinear,
)

CHECKPOINT_MAGIC = b"VTDETPRM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters for the two-stream detector.

    Hidden layers use tanh (smooth, so finite-difference gradient checks are
    well-behaved); heads use sigmoid.  A 2x bilinear downsample follows each
    of the first `downsamples` stream layers, so the prediction maps live at
    1/2**downsamples of the input resolution.
    """

    stream_channels: tuple[int, ...] = (8, 16, 16)
    fusion_channels: int = 16
    kernel_size: int = 3
    downsamples: int = 1
    init_gain: float = 1.0

    def __post_init__(self) -> None:
        if not self.stream_channels or any(c < 1 for c in self.stream_channels):
            raise ConfigError(f"stream_channels must all be >= 1, got {self.stream_channels}")
        if self.fusion_channels < 1:
            raise ConfigError(f"fusion_channels must be >= 1, got {self.fusion_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(
                f"kernel_size must be odd so same-padding preserves the grid, got {self.kernel_size}"
            )
        if not 0 <= self.downsamples <= len(self.stream_channels):
            raise ConfigError(
                f"downsamples must be in [0, {len(self.stream_channels)}], got {self.downsamples}"
            )
        if self.init_gain <= 0:
            raise ConfigError(f"init_gain must be positive, got {self.init_gain}")

    @property
    def scale_factor(self) -> int:
        """Input-to-prediction resolution ratio."""
        return 2 ** self.downsamples

    def to_json(self) -> str:
        return json.dumps(
            {
                "stream_channels": list(self.stream_channels),
                "fusion_channels": self.fusion_channels,
                "kernel_size": self.kernel_size,
                "downsamples": self.downsamples,
                "init_gain": self.init_gain,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        data = json.loads(text)
        data["stream_channels"] = tuple(data["stream_channels"])
        return cls(**data)


@dataclass
class Prediction:
    """Per-pixel probability maps for one image pair, at prediction resolution."""

    y_m: np.ndarray
    y_v: np.ndarray
    y_t: np.ndarray

    def __post_init__(self) -> None:
        if not (self.y_m.shape == self.y_v.shape == self.y_t.shape):
            raise ShapeMismatchError(
                f"prediction maps disagree: {self.y_m.shape}, {self.y_v.shape}, {self.y_t.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.y_m.shape


@dataclass
class DetectorParams:
    """All learnable tensors of the detector.

    The two streams share one layer layout (symmetric architecture); each
    head is a single 1x1 convolution to one channel.
    """

    arch: ArchConfig
    visible: list[ConvLayer] = field(default_factory=list)
    thermal: list[ConvLayer] = field(default_factory=list)
    fusion: ConvLayer = None
    head_m: ConvLayer = None
    head_v: ConvLayer = None
    head_t: ConvLayer = None

    def _layers(self) -> list[tuple[str, ConvLayer]]:
        named = [(f"visible.{i}", l) for i, l in enumerate(self.visible)]
        named += [(f"thermal.{i}", l) for i, l in enumerate(self.thermal)]
        named += [("fusion", self.fusion), ("head_m", self.head_m),
                  ("head_v", self.head_v), ("head_t", self.head_t)]
        return named

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Stable name -> array view mapping; in-place updates hit the model."""
        out: dict[str, np.ndarray] = {}
        for name, layer in self._layers():
            out[f"{name}.weights"] = layer.weights
            out[f"{name}.bias"] = layer.bias
        return out

    def copy(self) -> "DetectorParams":
        def copy_layer(l: ConvLayer) -> ConvLayer:
            return ConvLayer(l.weights.copy(), l.bias.copy(), l.stride, l.padding)

        return DetectorParams(
            arch=self.arch,
            visible=[copy_layer(l) for l in self.visible],
            thermal=[copy_layer(l) for l in self.thermal],
            fusion=copy_layer(self.fusion),
            head_m=copy_layer(self.head_m),
            head_v=copy_layer(self.head_v),
            head_t=copy_layer(self.head_t),
        )

    def params_hash(self) -> str:
        """SHA-256 over the serialized checkpoint bytes."""
        return hashlib.sha256(serialize_params(self)).hexdigest()


def _xavier_layer(rng: np.random.Generator, out_c: int, in_c: int, k: int,
                  gain: float, padding: int) -> ConvLayer:
    fan_in = in_c * k * k
    fan_out = out_c * k * k
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    weights = rng.normal(0.0, std, size=(out_c, in_c, k, k))
    return ConvLayer(weights=weights, bias=np.zeros(out_c), stride=1, padding=padding)


def init_detector(arch: ArchConfig, seed: int) -> DetectorParams:
    """Xavier-initialized detector: weight variance 2/(fan_in+fan_out), zero biases.

    Deterministic for a fixed seed; the two streams get independent draws.
    """
    rng = np.random.default_rng(seed)
    k = arch.kernel_size
    pad = k // 2

    def make_stream() -> list[ConvLayer]:
        layers = []
        in_c = 1
        for out_c in arch.stream_channels:
            layers.append(_xavier_layer(rng, out_c, in_c, k, arch.init_gain, pad))
            in_c = out_c
        return layers

    visible = make_stream()
    thermal = make_stream()
    stream_out = arch.stream_channels[-1]
    fusion = _xavier_layer(rng, arch.fusion_channels, 2 * stream_out, k, arch.init_gain, pad)
    head_m = _xavier_layer(rng, 1, arch.fusion_channels, 1, arch.init_gain, 0)
    head_v = _xavier_layer(rng, 1, stream_out, 1, arch.init_gain, 0)
    head_t = _xavier_layer(rng, 1, stream_out, 1, arch.init_gain, 0)
    return DetectorParams(arch=arch, visible=visible, thermal=thermal, fusion=fusion,
                          head_m=head_m, head_v=head_v, head_t=head_t)


def _check_input(arch: ArchConfig, image: np.ndarray) -> None:
    if image.ndim != 2:
        raise ShapeMismatchError(f"modality images must be 2-d, got shape {image.shape}")
    f = arch.scale_factor
    h, w = image.shape
    if h % f or w % f:
        raise ShapeMismatchError(
            f"input {h}x{w} not divisible by the prediction scale factor {f}"
        )


class _ForwardCache:
    """Intermediate activations retained for the backward pass."""

    __slots__ = ("stream_in", "stream_act", "cols", "fused_in", "fused_act", "pred")

    def __init__(self):
        self.stream_in = {"visible": [], "thermal": []}   # conv inputs per layer
        self.stream_act = {"visible": [], "thermal": []}  # post-tanh, pre-downsample
        self.cols = {}                                    # im2col matrices per conv
        self.fused_in = None                              # concatenated stream outputs
        self.fused_act = None                             # post-tanh fusion output
        self.pred = None


def _run_stream(params: DetectorParams, name: str, image: np.ndarray,
                cache: _ForwardCache | None) -> np.ndarray:
    layers = params.visible if name == "visible" else params.thermal
    x = image[None, :, :].astype(np.float64)
    for i, layer in enumerate(layers):
        if cache is not None:
            cache.stream_in[name].append(x)
        out, cols = conv2d_forward_cols(x, layer)
        x = tanh(out)
        if cache is not None:
            cache.stream_act[name].append(x)
            cache.cols[f"{name}.{i}"] = cols
        if i < params.arch.downsamples:
            x = downsample2x(x)
    return x


def _forward_cached(params: DetectorParams, pair) -> tuple[Prediction, _ForwardCache]:
    visible = np.asarray(pair.visible, dtype=np.float64)
    thermal = np.asarray(pair.thermal, dtype=np.float64)
    if visible.shape != thermal.shape:
        raise ShapeMismatchError(
            f"modalities must be aligned: visible {visible.shape} vs thermal {thermal.shape}"
        )
    _check_input(params.arch, visible)
    cache = _ForwardCache()
    fv = _run_stream(params, "visible", visible, cache)
    ft = _run_stream(params, "thermal", thermal, cache)
    cache.fused_in = np.concatenate([fv, ft], axis=0)
    fused_out, cache.cols["fusion"] = conv2d_forward_cols(cache.fused_in, params.fusion)
    cache.fused_act = tanh(fused_out)
    head_m_out, cache.cols["head_m"] = conv2d_forward_cols(cache.fused_act, params.head_m)
    head_v_out, cache.cols["head_v"] = conv2d_forward_cols(fv, params.head_v)
    head_t_out, cache.cols["head_t"] = conv2d_forward_cols(ft, params.head_t)
    pred = Prediction(
        y_m=sigmoid(head_m_out)[0],
        y_v=sigmoid(head_v_out)[0],
        y_t=sigmoid(head_t_out)[0],
    )
    cache.pred = pred
    return pred, cache


def forward(params: DetectorParams, pair) -> Prediction:
    """Pure forward pass over one image pair, producing the three probability maps.

    `pair` is any object with aligned 2-d `visible` and `thermal` arrays.
    """
    pred, _ = _forward_cached(params, pair)
    return pred


def _backward_stream(params: DetectorParams, name: str, cache: _ForwardCache,
                     grad_out: np.ndarray, grads) -> None:
    layers = params.visible if name == "visible" else params.thermal
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        act = cache.stream_act[name][i]
        if i < params.arch.downsamples:
            g = downsample2x_backward(g, act.shape)
        g = tanh_backward(act, g)
        gx, gw, gb = conv2d_backward(
            cache.stream_in[name][i], layers[i], g, cols=cache.cols[f"{name}.{i}"]
        )
        grads.accumulate(f"{name}.{i}.weights", gw)
        grads.accumulate(f"{name}.{i}.bias", gb)
        g = gx


def backward_from_heads(params: DetectorParams, cache: _ForwardCache,
                        grad_m: np.ndarray, grad_v: np.ndarray, grad_t: np.ndarray,
                        grads) -> None:
    """Accumulate parameter gradients given dLoss/dProbability per head."""
    pred = cache.pred
    stream_out = params.arch.stream_channels[-1]
    fv = cache.fused_in[:stream_out]
    ft = cache.fused_in[stream_out:]

    # Multispectral head -> fusion -> both streams.
    gz_m = sigmoid_backward(pred.y_m, grad_m)[None]
    g_fused_act, gw, gb = conv2d_backward(cache.fused_act, params.head_m, gz_m,
                                          cols=cache.cols["head_m"])
    grads.accumulate("head_m.weights", gw)
    grads.accumulate("head_m.bias", gb)
    g_fused_pre = tanh_backward(cache.fused_act, g_fused_act)
    g_concat, gw, gb = conv2d_backward(cache.fused_in, params.fusion, g_fused_pre,
                                       cols=cache.cols["fusion"])
    grads.accumulate("fusion.weights", gw)
    grads.accumulate("fusion.bias", gb)
    g_fv = g_concat[:stream_out].copy()
    g_ft = g_concat[stream_out:].copy()

    # Supervision heads tap the stream outputs directly.
    gz_v = sigmoid_backward(pred.y_v, grad_v)[None]
    gx, gw, gb = conv2d_backward(fv, params.head_v, gz_v, cols=cache.cols["head_v"])
    grads.accumulate("head_v.weights", gw)
    grads.accumulate("head_v.bias", gb)
    g_fv += gx

    gz_t = sigmoid_backward(pred.y_t, grad_t)[None]
    gx, gw, gb = conv2d_backward(ft, params.head_t, gz_t, cols=cache.cols["head_t"])
    grads.accumulate("head_t.weights", gw)
    grads.accumulate("head_t.bias", gb)
    g_ft += gx

    _backward_stream(params, "visible", cache, g_fv, grads)
    _backward_stream(params, "thermal", cache, g_ft, grads)


def upsample_prediction(pred: Prediction, target_h: int, target_w: int) -> Prediction:
    """Bilinearly upsample all three maps to the requested size."""
    return Prediction(
        y_m=upsample_bilinear(pred.y_m, target_h, target_w),
        y_v=upsample_bilinear(pred.y_v, target_h, target_w),
        y_t=upsample_bilinear(pred.y_t, target_h, target_w),
    )


def serialize_params(params: DetectorParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    arch_bytes = params.arch.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(arch_bytes)))
    buf.write(arch_bytes)
    tensors = params.named_tensors()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize_params(blob: bytes) -> DetectorParams:
    view = io.BytesIO(blob)

    def read(fmt: str):
        size = struct.calcsize(fmt)
        data = view.read(size)
        if len(data) != size:
            raise ConfigError("checkpoint truncated")
        return struct.unpack(fmt, data)

    magic = view.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"not a detector checkpoint (magic {magic!r})")
    (version,) = read("<I")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (arch_len,) = read("<I")
    arch = ArchConfig.from_json(view.read(arch_len).decode("utf-8"))
    (count,) = read("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = view.read(name_len).decode("utf-8")
        (ndim,) = read("<I")
        shape = tuple(read("<I")[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        raw = view.read(8 * n)
        if len(raw) != 8 * n:
            raise ConfigError("checkpoint truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

    params = init_detector(arch, seed=0)
    expected = params.named_tensors()
    if set(expected.keys()) != set(tensors.keys()):
        raise ConfigError("checkpoint tensor names do not match the architecture")
    for name, target in expected.items():
        if tensors[name].shape != target.shape:
            raise ConfigError(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {target.shape}"
            )
        target[...] = tensors[name]
    return params


def save_checkpoint(params: DetectorParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_checkpoint(path) -> DetectorParams:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())
