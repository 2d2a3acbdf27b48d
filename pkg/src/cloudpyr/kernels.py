"""Differentiable tensor kernels.

Every tensor is a dense numpy array laid out contiguously as
(batch N, channels C, height H, width W), float32 in training and
float64 in the verification suites.  Each kernel comes as a pair of
pure functions: a forward evaluation and a backward evaluation that
maps the upstream gradient to gradients w.r.t. inputs and parameters.
Backward passes recompute what they need from the saved inputs instead
of threading opaque caches around.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

# Elementwise finite checks on kernels that can overflow. Cheap at the
# scales this engine targets; flip off for large-scene throughput runs.
FINITE_CHECKS = True


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _require_nchw(x: np.ndarray, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (N,C,H,W) tensor, got ndim={x.ndim}")


@dataclass
class ConvSpec:
    """Convolution parameters: kernel (Cout,Cin,kH,kW), bias (Cout,)."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel.shape[2], self.kernel.shape[3]
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo


@dataclass
class BatchNormState:
    """Per-channel affine normalization state.

    mode is 'training' (batch statistics, running stats updated by EMA)
    or 'inference' (running statistics, no mutation).  Normalization uses
    the biased batch variance; the running variance stores the unbiased
    estimate.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5
    mode: str = "training"

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold padded input into (N, C*kh*kw, ho*wo) columns."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Fold (N, C*kh*kw, ho*wo) columns back, accumulating overlaps."""
    n, c, hp, wp = shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def _conv_check(x: np.ndarray, spec: ConvSpec) -> tuple[int, int]:
    _require_nchw(x, "conv2d")
    if spec.kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (Cout,Cin,kH,kW), got ndim={spec.kernel.ndim}")
    cin_k = spec.kernel.shape[1]
    if x.shape[1] != cin_k:
        raise ShapeError(
            f"conv2d channel mismatch: input dims {x.shape} carry C={x.shape[1]}, "
            f"kernel dims {spec.kernel.shape} expect Cin={cin_k}"
        )
    if spec.bias.shape != (spec.kernel.shape[0],):
        raise ShapeError(
            f"conv2d bias length {spec.bias.shape} does not match Cout={spec.kernel.shape[0]}"
        )
    if spec.stride < 1 or spec.padding < 0:
        raise ShapeError(f"conv2d invalid stride/padding: {spec.stride}/{spec.padding}")
    ho, wo = spec.out_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {x.shape}, kernel {spec.kernel.shape}, "
            f"stride {spec.stride}, padding {spec.padding}"
        )
    return ho, wo


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """2-D cross-correlation with symmetric zero padding.

    Output extents: floor((H + 2p - kH)/stride) + 1, same for W.
    """
    ho, wo = _conv_check(x, spec)
    n = x.shape[0]
    cout, _, kh, kw = spec.kernel.shape
    cols = _im2col(_pad2d(x, spec.padding), kh, kw, spec.stride, ho, wo)
    k2d = spec.kernel.reshape(cout, -1)
    out = np.matmul(k2d, cols) + spec.bias[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    _check_finite(out, "conv2d")
    return out


def conv2d_backward(
    x: np.ndarray, spec: ConvSpec, upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. conv input, kernel, and bias."""
    ho, wo = _conv_check(x, spec)
    n = x.shape[0]
    cout, _, kh, kw = spec.kernel.shape
    if upstream_grad.shape != (n, cout, ho, wo):
        raise ShapeError(
            f"conv2d_backward upstream dims {upstream_grad.shape} do not match "
            f"forward output dims {(n, cout, ho, wo)}"
        )
    xp = _pad2d(x, spec.padding)
    cols = _im2col(xp, kh, kw, spec.stride, ho, wo)
    g2 = upstream_grad.reshape(n, cout, ho * wo)

    grad_bias = upstream_grad.sum(axis=(0, 2, 3))
    grad_kernel = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(spec.kernel.shape)

    k2d = spec.kernel.reshape(cout, -1)
    gcols = np.matmul(k2d.T, g2)
    gxp = _col2im(gcols, xp.shape, kh, kw, spec.stride, ho, wo)
    p = spec.padding
    grad_input = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
    return grad_input, grad_kernel, grad_bias


def _bn_check(x: np.ndarray, state: BatchNormState) -> None:
    _require_nchw(x, "batchnorm")
    c = x.shape[1]
    for name in ("gamma", "beta", "running_mean", "running_var"):
        v = getattr(state, name)
        if v.shape != (c,):
            raise ShapeError(
                f"batchnorm {name} length {v.shape} does not match input C={c}"
            )


def batchnorm(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    """Per-channel batch normalization.

    Training mode normalizes with the batch's own statistics and updates
    the running stats in place; inference mode uses the stored running
    stats and leaves the state untouched.
    """
    _bn_check(x, state)
    n, c, h, w = x.shape
    if state.mode == "training":
        count = n * h * w
        if count < 2:
            raise ShapeError(
                f"batchnorm needs at least 2 elements per channel, got {count}"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var * (count / (count - 1))
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.epsilon)
    out = (x - mean[None, :, None, None]) * (state.gamma * inv)[None, :, None, None]
    out += state.beta[None, :, None, None]
    _check_finite(out, "batchnorm")
    return out


def batchnorm_backward(
    x: np.ndarray, state: BatchNormState, upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma, beta.

    Recomputes the forward statistics from x; in training mode the full
    coupling through the batch mean/variance is included.
    """
    _bn_check(x, state)
    if upstream_grad.shape != x.shape:
        raise ShapeError(
            f"batchnorm_backward upstream dims {upstream_grad.shape} != input dims {x.shape}"
        )
    axes = (0, 2, 3)
    if state.mode == "training":
        m = float(x.shape[0] * x.shape[2] * x.shape[3])
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (x - mean) * inv
        grad_beta = upstream_grad.sum(axis=axes)
        grad_gamma = (upstream_grad * xhat).sum(axis=axes)
        gxh = upstream_grad * state.gamma[None, :, None, None]
        grad_input = (
            gxh
            - gxh.mean(axis=axes, keepdims=True)
            - xhat * (gxh * xhat).mean(axis=axes, keepdims=True)
        ) * inv
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        grad_beta = upstream_grad.sum(axis=axes)
        grad_gamma = (upstream_grad * xhat).sum(axis=axes)
        grad_input = upstream_grad * (state.gamma * inv)[None, :, None, None]
    return grad_input, grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """Pass the gradient where x > 0, zero elsewhere (zero at the kink)."""
    return upstream_grad * (x > 0)


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max pooling. H and W must be even."""
    _require_nchw(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"maxpool2 requires even extents, got {h}x{w}; pad the input first"
        )
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def maxpool2_backward(x: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """Route each window's gradient to its argmax (first in scan order on ties)."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if upstream_grad.shape != (n, c, ho, wo):
        raise ShapeError(
            f"maxpool2_backward upstream dims {upstream_grad.shape} != {(n, c, ho, wo)}"
        )
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)  # first max wins: row-major (0,0),(0,1),(1,0),(1,1)
    onehot = np.zeros_like(win)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    g = onehot * upstream_grad[..., None]
    g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return g


def upsample2_nearest(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling: every source pixel becomes a 2x2 block."""
    _require_nchw(x, "upsample2_nearest")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(upstream_grad: np.ndarray) -> np.ndarray:
    """Sum the four upstream gradients contributed by each source pixel."""
    n, c, h2, w2 = upstream_grad.shape
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"upsample2_backward expects even extents, got {h2}x{w2}")
    return upstream_grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two tensors of identical dims."""
    if a.shape != b.shape:
        raise ShapeError(f"add dims mismatch: {a.shape} vs {b.shape}")
    return a + b


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax across the channel axis, max-subtracted for stability."""
    _require_nchw(x, "softmax_channels")
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs C >= 2, got C={x.shape[1]}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)
    _check_finite(out, "softmax_channels")
    return out
