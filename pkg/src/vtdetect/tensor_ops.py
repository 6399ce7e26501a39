"""Dense numeric layer: 2-D convolution, activations, resampling and SGD.

Feature maps are float64 numpy arrays in (channels, height, width) layout,
one image at a time.  All gradients are computed by hand-written adjoints;
`check_gradients` verifies them against central finite differences.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeMismatchError

__all__ = [
    "ConvLayer",
    "GradStore",
    "GradCheckReport",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_output_shape",
    "sigmoid",
    "sigmoid_backward",
    "tanh",
    "tanh_backward",
    "downsample2x",
    "downsample2x_backward",
    "upsample_bilinear",
    "sgd_step",
    "clip_gradients",
    "check_gradients",
]

# Sigmoid outputs are kept strictly inside (0, 1) so log-space losses stay finite.
_SIGMOID_MARGIN = 1e-12


@dataclass
class ConvLayer:
    """One 2-D convolution: weights (out, in, kh, kw), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeMismatchError(
                f"conv weights must be 4-d (out, in, kh, kw), got {self.weights.shape}"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )
        if self.stride < 1:
            raise ShapeMismatchError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeMismatchError(f"padding must be >= 0, got {self.padding}")


def conv2d_output_shape(in_h: int, in_w: int, layer: ConvLayer) -> tuple[int, int]:
    kh, kw = layer.weights.shape[2], layer.weights.shape[3]
    out_h = (in_h + 2 * layer.padding - kh) // layer.stride + 1
    out_w = (in_w + 2 * layer.padding - kw) // layer.stride + 1
    return out_h, out_w


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Patches of `padded` (C, Hp, Wp) as a (out_h*out_w, C*kh*kw) matrix."""
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, out_h, out_w, kh, kw)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, -1)
    return np.ascontiguousarray(cols)


def conv2d_forward_cols(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
    """Convolution that also returns its im2col matrix for reuse in backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"input must be 3-d (C, H, W), got shape {x.shape}")
    out_c, in_c, kh, kw = layer.weights.shape
    if x.shape[0] != in_c:
        raise ShapeMismatchError(
            f"channel axis mismatch: input has {x.shape[0]} channels, layer expects {in_c}"
        )
    out_h, out_w = conv2d_output_shape(x.shape[1], x.shape[2], layer)
    if out_h < 1:
        raise ShapeMismatchError(
            f"height {x.shape[1]} too small for kernel {kh} at padding {layer.padding}"
        )
    if out_w < 1:
        raise ShapeMismatchError(
            f"width {x.shape[2]} too small for kernel {kw} at padding {layer.padding}"
        )
    p = layer.padding
    padded = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(padded, kh, kw, layer.stride, out_h, out_w)
    out = cols @ layer.weights.reshape(out_c, -1).T + layer.bias
    return np.ascontiguousarray(out.T).reshape(out_c, out_h, out_w), cols


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Direct 2-D convolution (cross-correlation) of a (C, H, W) map."""
    return conv2d_forward_cols(x, layer)[0]


def conv2d_backward(
    x: np.ndarray, layer: ConvLayer, upstream_grad: np.ndarray,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of conv2d_forward.

    Returns (input_grad, weight_grad, bias_grad); the caller accumulates the
    parameter gradients into its GradStore.  Passing the im2col matrix from
    `conv2d_forward_cols` avoids recomputing it.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    out_c, in_c, kh, kw = layer.weights.shape
    if x.ndim != 3 or x.shape[0] != in_c:
        raise ShapeMismatchError(
            f"channel axis mismatch: input shape {x.shape}, layer expects {in_c} channels"
        )
    out_h, out_w = conv2d_output_shape(x.shape[1], x.shape[2], layer)
    if upstream_grad.shape != (out_c, out_h, out_w):
        raise ShapeMismatchError(
            f"upstream gradient shape {upstream_grad.shape} does not match "
            f"forward output {(out_c, out_h, out_w)}"
        )
    p, s = layer.padding, layer.stride
    hp, wp = x.shape[1] + 2 * p, x.shape[2] + 2 * p
    if cols is None:
        padded = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(padded, kh, kw, s, out_h, out_w)

    g = np.ascontiguousarray(upstream_grad.reshape(out_c, -1))  # (out_c, N)
    bias_grad = g.sum(axis=1)
    weight_grad = (g @ cols).reshape(layer.weights.shape)

    grad_cols = g.T @ layer.weights.reshape(out_c, -1)  # (N, in_c*kh*kw)
    grad_cols = np.ascontiguousarray(grad_cols.T).reshape(in_c, kh, kw, out_h, out_w)
    grad_padded = np.zeros((in_c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, i : i + s * out_h : s, j : j + s * out_w : s] += grad_cols[:, i, j]
    input_grad = grad_padded[:, p : hp - p, p : wp - p] if p else grad_padded
    return input_grad, weight_grad, bias_grad


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, output strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIGMOID_MARGIN, 1.0 - _SIGMOID_MARGIN)


def sigmoid_backward(output: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its cached output: s * (1 - s) * g."""
    return output * (1.0 - output) * upstream_grad


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def tanh_backward(output: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    return (1.0 - output * output) * upstream_grad


def downsample2x(x: np.ndarray) -> np.ndarray:
    """Bilinear 2x downsampling of a (C, H, W) map: mean over 2x2 cells.

    At exactly half scale, bilinear resampling with pixel-center alignment
    reduces to averaging each 2x2 block; trailing odd rows/columns are dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"input must be 3-d (C, H, W), got shape {x.shape}")
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatchError(f"spatial dims must be >= 2 to downsample, got {h}x{w}")
    oh, ow = h // 2, w // 2
    blocks = x[:, : 2 * oh, : 2 * ow].reshape(c, oh, 2, ow, 2)
    return blocks.mean(axis=(2, 4))


def downsample2x_backward(upstream_grad: np.ndarray, in_shape: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of downsample2x: spread each output gradient over its 2x2 cell."""
    c, h, w = in_shape
    oh, ow = h // 2, w // 2
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != (c, oh, ow):
        raise ShapeMismatchError(
            f"upstream gradient shape {g.shape} does not match downsampled {(c, oh, ow)}"
        )
    out = np.zeros((c, h, w))
    quarter = g * 0.25
    for di in (0, 1):
        for dj in (0, 1):
            out[:, di : 2 * oh : 2, dj : 2 * ow : 2] += quarter
    return out


def upsample_bilinear(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear upsampling of a (H, W) map with pixel-center alignment.

    Source coordinate of output pixel (i, j) is ((i + 0.5) * H/th - 0.5,
    (j + 0.5) * W/tw - 0.5), clamped to the source grid; the four nearest
    source pixels are blended by their fractional offsets.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-d map, got shape {x.shape}")
    h, w = x.shape
    if target_h < h or target_w < w:
        raise ShapeMismatchError(
            f"target {target_h}x{target_w} smaller than source {h}x{w}; only upsampling is supported"
        )
    sy = np.clip((np.arange(target_h) + 0.5) * (h / target_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(target_w) + 0.5) * (w / target_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    top = x[np.ix_(y0, x0)] * (1 - fx) + x[np.ix_(y0, x1)] * fx
    bot = x[np.ix_(y1, x0)] * (1 - fx) + x[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


class GradStore:
    """One gradient buffer per learnable tensor, zeroed between optimizer steps."""

    def __init__(self, like: Mapping[str, np.ndarray]):
        self.buffers: dict[str, np.ndarray] = {
            name: np.zeros_like(np.asarray(t, dtype=np.float64)) for name, t in like.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        buf = self.buffers[name]
        if buf.shape != grad.shape:
            raise ShapeMismatchError(
                f"gradient for {name!r} has shape {grad.shape}, expected {buf.shape}"
            )
        buf += grad

    def zero(self) -> None:
        for buf in self.buffers.values():
            buf[...] = 0.0

    def global_norm(self) -> float:
        total = 0.0
        for buf in self.buffers.values():
            total += float(np.sum(buf * buf))
        return float(np.sqrt(total))


def sgd_step(params: Mapping[str, np.ndarray], grads: GradStore, lr: float) -> Mapping[str, np.ndarray]:
    """In-place SGD update p <- p - lr * g on every parameter, then zero the grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(params.keys()) != set(grads.buffers.keys()):
        raise ShapeMismatchError("parameter names do not match gradient buffers")
    for name, g in grads.buffers.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name!r}; aborting update")
    for name, p in params.items():
        p -= lr * grads.buffers[name]
    grads.zero()
    return params


def clip_gradients(grads: GradStore, max_norm: float) -> GradStore:
    """Rescale all buffers so the global L2 norm does not exceed max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = grads.global_norm()
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm; cannot clip")
    if norm > max_norm:
        scale = max_norm / norm
        for buf in grads.buffers.values():
            buf *= scale
    return grads


@dataclass
class GradCheckReport:
    """Per-tensor max relative error between analytic and finite-difference gradients."""

    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        lines = [
            f"{name}: max rel err {err:.3e}" for name, err in sorted(self.per_param.items())
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max {self.max_rel_error:.3e} vs tolerance {self.tolerance:.1e}")
        return "\n".join(lines)


def check_gradients(
    closure: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    abs_tol: float = 1e-7,
    loss_only: Callable[[], float] | None = None,
) -> GradCheckReport:
    """Compare the closure's analytic gradients against central finite differences.

    The closure must be deterministic, returning (loss, gradients keyed like
    `params`).  Each parameter entry is perturbed by +-step in place; the
    finite-difference evaluations use `loss_only` when given (saving the
    backward pass), else the closure's loss.  Entries whose analytic/numeric
    difference is below `abs_tol` count as exact agreement; otherwise the
    error is |a - n| / max(|a|, |n|).
    """
    _, analytic = closure()
    analytic = {name: np.array(g, copy=True) for name, g in analytic.items()}
    if loss_only is None:
        loss_only = lambda: closure()[0]
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        a = analytic[name]
        if a.shape != p.shape:
            raise ShapeMismatchError(
                f"analytic gradient for {name!r} has shape {a.shape}, expected {p.shape}"
            )
        worst = 0.0
        flat = p.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            loss_plus = loss_only()
            flat[i] = orig - step
            loss_minus = loss_only()
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            diff = abs(a_flat[i] - numeric)
            if diff > abs_tol:
                rel = diff / max(abs(a_flat[i]), abs(numeric), abs_tol)
                worst = max(worst, rel)
        report.per_param[name] = worst
    return report
