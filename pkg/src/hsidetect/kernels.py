"""Deterministic dense tensor kernels with analytic gradients.

All tensors are numpy arrays in (batch, channel, height, width) layout,
C-contiguous. Kernels are compiled with numba without fastmath, so the
floating-point summation order is exactly the order written here: bias
first, then input channel, kernel row, kernel column. Results are
bit-reproducible and independent of thread count (no shared accumulators).

Convolution uses Same padding (symmetric zero pad of kernel//2), so the
output spatial size is ceil(size/stride). Loss reductions accumulate in
float64 regardless of storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ArgError, ShapeError


@dataclass
class ConvParams:
    """Weights (outC, inC, kH, kW), bias (outC,), stride 1 or 2, Same padding."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ArgError("conv weights must be 4-D (outC, inC, kH, kW)")
        kh, kw = self.weights.shape[2], self.weights.shape[3]
        if kh != kw or kh % 2 == 0:
            raise ArgError(f"kernel must be square with odd side, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ArgError(f"stride must be 1 or 2, got {self.stride}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal output channel count")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ArgError("batchnorm epsilon must be positive")
        if (self.running_var < 0).any():
            raise ArgError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_params(channels: int, dtype=np.float32) -> BatchNormParams:
    """Fresh per-channel parameters: identity affine, unit running variance."""
    return BatchNormParams(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# numba kernels. The inner j-loops run over slice views so LLVM can vectorize
# them; per-output-element operation order is unaffected by that.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv_fwd(xpad, w, b, stride, out):
    n_, oc, oh, ow = out.shape
    ic, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    span = (ow - 1) * stride + 1
    for n in range(n_):
        for o in range(oc):
            bval = b[o]
            for i in range(oh):
                orow = out[n, o, i]
                for j in range(ow):
                    orow[j] = bval
            for c in range(ic):
                xplane = xpad[n, c]
                for u in range(kh):
                    for v in range(kw):
                        wv = w[o, c, u, v]
                        for i in range(oh):
                            orow = out[n, o, i]
                            if stride == 1:
                                xs = xplane[i + u, v:v + ow]
                                for j in range(ow):
                                    orow[j] += xs[j] * wv
                            else:
                                xs = xplane[i * stride + u, v:v + span:stride]
                                for j in range(ow):
                                    orow[j] += xs[j] * wv


@njit(cache=True)
def _conv_bwd_x(gxpad, w, go, stride):
    n_, oc, oh, ow = go.shape
    ic, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    span = (ow - 1) * stride + 1
    for n in range(n_):
        for c in range(ic):
            gplane = gxpad[n, c]
            for o in range(oc):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[o, c, u, v]
                        for i in range(oh):
                            gsrc = go[n, o, i]
                            if stride == 1:
                                grow = gplane[i + u, v:v + ow]
                                for j in range(ow):
                                    grow[j] += gsrc[j] * wv
                            else:
                                grow = gplane[i * stride + u, v:v + span:stride]
                                for j in range(ow):
                                    grow[j] += gsrc[j] * wv


@njit(cache=True)
def _conv_bwd_w(xpad, go, stride, gw, tmp):
    n_, oc, oh, ow = go.shape
    ic, kh, kw = gw.shape[1], gw.shape[2], gw.shape[3]
    span = (ow - 1) * stride + 1
    for o in range(oc):
        for c in range(ic):
            for u in range(kh):
                for v in range(kw):
                    for j in range(ow):
                        tmp[j] = 0.0
                    for n in range(n_):
                        xplane = xpad[n, c]
                        for i in range(oh):
                            gs = go[n, o, i]
                            if stride == 1:
                                xs = xplane[i + u, v:v + ow]
                                for j in range(ow):
                                    tmp[j] += np.float64(xs[j]) * np.float64(gs[j])
                            else:
                                xs = xplane[i * stride + u, v:v + span:stride]
                                for j in range(ow):
                                    tmp[j] += np.float64(xs[j]) * np.float64(gs[j])
                    acc = 0.0
                    for j in range(ow):
                        acc += tmp[j]
                    gw[o, c, u, v] = acc


@njit(cache=True)
def _sq_err_sum(x, y):
    acc = 0.0
    for i in range(x.size):
        d = np.float64(y[i]) - np.float64(x[i])
        acc += d * d
    return acc


@njit(cache=True)
def _log1p_sq_err_sum(x, y):
    acc = 0.0
    for i in range(x.size):
        xi = np.float64(x[i])
        yi = np.float64(y[i])
        if xi < 0.0:
            xi = 0.0
        if yi < 0.0:
            yi = 0.0
        d = np.log1p(xi) - np.log1p(yi)
        acc += d * d
    return acc


def _same_pad(x: np.ndarray, kernel: int) -> np.ndarray:
    p = kernel // 2
    if p == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    xpad = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xpad[:, :, p:p + h, p:p + w] = x
    return xpad


def conv_output_shape(h: int, w: int, stride: int) -> tuple[int, int]:
    return -(-h // stride), -(-w // stride)


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """out[n,o,i,j] = bias[o] + sum_{c,u,v} x[n,c,i*s+u-pad,j*s+v-pad] * w[o,c,u,v].

    Zero outside bounds; summation order is exactly (bias, then c, u, v).
    """
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D, got {x.ndim}-D")
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, conv expects {p.in_channels}"
        )
    oh, ow = conv_output_shape(x.shape[2], x.shape[3], p.stride)
    out = np.empty((x.shape[0], p.out_channels, oh, ow), dtype=x.dtype)
    _conv_fwd(_same_pad(x, p.kernel), p.weights, p.bias, p.stride, out)
    return out


def conv2d_backward(
    x: np.ndarray, p: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    oh, ow = conv_output_shape(x.shape[2], x.shape[3], p.stride)
    expected = (x.shape[0], p.out_channels, oh, ow)
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {p.in_channels}")
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    grad_out = np.ascontiguousarray(grad_out)
    pad = p.kernel // 2
    n, c, h, w = x.shape
    gxpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    _conv_bwd_x(gxpad, p.weights, grad_out, p.stride)
    grad_x = np.ascontiguousarray(gxpad[:, :, pad:pad + h, pad:pad + w])
    gw = np.zeros(p.weights.shape, dtype=np.float64)
    _conv_bwd_w(_same_pad(x, p.kernel), grad_out, p.stride, gw, np.zeros(ow, dtype=np.float64))
    grad_w = gw.astype(p.weights.dtype)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(p.bias.dtype)
    return grad_x, grad_w, grad_b


def upsample2d_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling: out[n,c,i,j] = x[n,c,i//factor,j//factor]."""
    if factor < 1:
        raise ArgError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return np.ascontiguousarray(x.repeat(factor, axis=2).repeat(factor, axis=3))


def upsample2d_nearest_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    """Sums the incoming gradient over each factor x factor output block."""
    if factor < 1:
        raise ArgError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return grad_out.copy()
    n, c, h, w = grad_out.shape
    if h % factor or w % factor:
        raise ShapeError(f"grad shape {grad_out.shape} not divisible by factor {factor}")
    blocks = grad_out.reshape(n, c, h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(3, 5), dtype=np.float64).astype(grad_out.dtype)


def _check_bn_channels(x: np.ndarray, p: BatchNormParams) -> None:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(
            f"batchnorm expects (N,{p.channels},H,W) input, got {x.shape}"
        )


def _batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Biased per-channel mean and variance over (N, H, W), in float64."""
    mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
    xc = x.astype(np.float64) - mu[None, :, None, None]
    var = np.mean(xc * xc, axis=(0, 2, 3))
    return mu, var


def batchnorm_forward(
    x: np.ndarray, p: BatchNormParams, mode: str, update_running: bool = True
) -> np.ndarray:
    """Normalize per channel; mode is "train" (batch stats) or "infer".

    Train mode also blends the batch statistics into the running estimates
    with the configured momentum (new = (1-m)*old + m*batch) unless
    ``update_running`` is False.
    """
    _check_bn_channels(x, p)
    if mode == "train":
        mu, var = _batch_stats(x)
        if update_running:
            m = p.momentum
            dt = p.running_mean.dtype
            p.running_mean = ((1.0 - m) * p.running_mean.astype(np.float64) + m * mu).astype(dt)
            p.running_var = ((1.0 - m) * p.running_var.astype(np.float64) + m * var).astype(dt)
    elif mode == "infer":
        mu = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    else:
        raise ArgError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + p.epsilon)
    a = (p.gamma.astype(np.float64) * inv)[None, :, None, None]
    out = a * (x - mu[None, :, None, None]) + p.beta.astype(np.float64)[None, :, None, None]
    return out.astype(x.dtype)


def batchnorm_backward(
    x: np.ndarray, p: BatchNormParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of train-mode batchnorm w.r.t. input, gamma and beta."""
    _check_bn_channels(x, p)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    mu, var = _batch_stats(x)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x.astype(np.float64) - mu[None, :, None, None]) * inv[None, :, None, None]
    go = grad_out.astype(np.float64)
    grad_gamma = (go * xhat).sum(axis=(0, 2, 3))
    grad_beta = go.sum(axis=(0, 2, 3))
    m = x.shape[0] * x.shape[2] * x.shape[3]
    dxhat = go * p.gamma.astype(np.float64)[None, :, None, None]
    term = (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    grad_x = (inv[None, :, None, None] / m) * term
    return (
        grad_x.astype(x.dtype),
        grad_gamma.astype(p.gamma.dtype),
        grad_beta.astype(p.beta.dtype),
    )


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient passes where x > 0; the subgradient at exactly 0 is 0."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return grad_out * (x > 0)


def mse_loss(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient 2*(y-x)/count w.r.t. y."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    count = x.size
    value = _sq_err_sum(np.ascontiguousarray(x).reshape(-1),
                        np.ascontiguousarray(y).reshape(-1)) / count
    grad = (y - x) * (2.0 / count)
    return float(value), grad


def msle_loss(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared logarithmic error in log1p form, with gradient w.r.t. y.

    Negative entries are clamped to 0 before the logarithm (raw radiance is
    non-negative; model outputs may transiently dip below zero). The clamp
    contributes zero gradient, matching the ReLU subgradient convention.
    """
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    count = x.size
    value = _log1p_sq_err_sum(np.ascontiguousarray(x).reshape(-1),
                              np.ascontiguousarray(y).reshape(-1)) / count
    xc = np.maximum(x.astype(np.float64), 0.0)
    yc = np.maximum(y.astype(np.float64), 0.0)
    grad = (2.0 / count) * (np.log1p(yc) - np.log1p(xc)) / (1.0 + yc)
    grad = np.where(y > 0, grad, 0.0).astype(y.dtype)
    return float(value), grad


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: list[np.ndarray], lr: float = 0.001) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state must have the same arity")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    passed: bool
    entries_checked: int
    worst_param: int = -1
    worst_entry: int = -1


def finite_diff_check(
    model_fn,
    params: list[np.ndarray],
    input: np.ndarray,
    tolerance: float = 1e-4,
    rel_step: float = 1e-4,
    max_entries_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``model_fn(params, input)`` must return ``(loss, grads)`` with one
    gradient array per parameter and no side effects. Parameters are copied
    to float64 before checking. When ``max_entries_per_tensor`` is set, a
    seeded subset of entries is probed per tensor instead of all of them.
    """
    params64 = [p.astype(np.float64) for p in params]
    _, grads = model_fn(params64, input)
    rng = np.random.default_rng(seed)
    worst = (0.0, -1, -1)
    checked = 0
    for pi, (p, g) in enumerate(zip(params64, grads)):
        flat = p.reshape(-1)
        if max_entries_per_tensor is not None and flat.size > max_entries_per_tensor:
            idxs = np.sort(rng.choice(flat.size, size=max_entries_per_tensor, replace=False))
        else:
            idxs = np.arange(flat.size)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for ei in idxs:
            orig = flat[ei]
            h = rel_step * max(abs(orig), 1.0)
            flat[ei] = orig + h
            lp, _ = model_fn(params64, input)
            flat[ei] = orig - h
            lm, _ = model_fn(params64, input)
            flat[ei] = orig
            fd = (lp - lm) / (2.0 * h)
            an = gflat[ei]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
            checked += 1
            if rel > worst[0]:
                worst = (rel, pi, int(ei))
    return GradCheckReport(
        max_rel_err=worst[0],
        tolerance=tolerance,
        passed=worst[0] < tolerance,
        entries_checked=checked,
        worst_param=worst[1],
        worst_entry=worst[2],
    )
