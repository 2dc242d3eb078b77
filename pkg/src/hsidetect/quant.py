"""Uniform 8-bit affine quantization of the trained autoencoder.

Weights are quantized symmetrically per tensor (zero point 0, scale
max|w|/127), activations asymmetrically from calibration ranges. Biases are
INT32 at exactly input_scale * weight_scale. Inference runs integer-only:
INT8 x INT8 products accumulate in INT32, the requantization multiplier is
applied in float64 and rounded half away from zero.

The companion reference path (``qforward_reference``) executes the identical
arithmetic with float64 carriers. Every intermediate there is an exact
integer below 2**53, so it must agree with the integer path bit for bit;
that equality is the module's central self-check. It is also exactly the
quantize-dequantize ("fake quant") float simulation, expressed in lattice
coordinates so no rounding ambiguity exists.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ArgError, DivergedError, FormatError, IoError, ShapeError
from .kernels import (
    ConvParams,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    conv_output_shape,
    init_adam,
    mse_loss,
    relu,
    relu_backward,
    upsample2d_nearest,
    upsample2d_nearest_backward,
    _conv_fwd,
    _same_pad,
)
from .model import (
    BatchNormLayer,
    CaeConfig,
    CaeModel,
    ConvLayer,
    ReluLayer,
    UpsampleLayer,
    copy_model,
    _conv_plan,
)

CAEQ_MAGIC = b"CAEQ"
CAEQ_VERSION = 1

MODE_MINMAX = "minmax"
MODE_PERCENTILE = "percentile99.9"
_HIST_BINS = 2048
_PERCENTILE_TAIL = 0.001  # clip 0.1% from each side


class QScheme(enum.Enum):
    SYMMETRIC_WEIGHT = "symmetric_weight"
    ASYMMETRIC_ACTIVATION = "asymmetric_activation"


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    scheme: QScheme

    def __post_init__(self):
        if not self.scale > 0:
            raise ArgError(f"quant scale must be positive, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ArgError(f"zero point {self.zero_point} outside int8 range")
        if self.scheme is QScheme.SYMMETRIC_WEIGHT and self.zero_point != 0:
            raise ArgError("symmetric weight scheme requires zero_point 0")


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero. Exact in float64."""
    v = np.asarray(v, dtype=np.float64)
    t = np.trunc(v)
    return t + np.trunc(2.0 * (v - t))


def quantize_tensor(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """q = clamp(round(x / scale) + zero_point, -128, 127), as int8."""
    v = np.asarray(x, dtype=np.float64) / p.scale
    q = round_half_away(v) + p.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize_tensor(q: np.ndarray, p: QuantParams, dtype=np.float64) -> np.ndarray:
    return ((np.asarray(q, dtype=np.float64) - p.zero_point) * p.scale).astype(dtype)


def representable_range(p: QuantParams) -> tuple[float, float]:
    return (-128 - p.zero_point) * p.scale, (127 - p.zero_point) * p.scale


def weight_params(w: np.ndarray) -> QuantParams:
    """Symmetric per-tensor scale max|w|/127; degenerate all-zero falls to 1."""
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    return QuantParams(scale=scale, zero_point=0, scheme=QScheme.SYMMETRIC_WEIGHT)


def activation_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric params covering [lo, hi]; a constant site maps exactly."""
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ArgError(f"invalid activation range [{lo}, {hi}]")
    if lo == hi:
        zp = int(np.clip(-round_half_away(lo), -128, 127))
        return QuantParams(scale=1.0, zero_point=zp,
                           scheme=QScheme.ASYMMETRIC_ACTIVATION)
    scale = (hi - lo) / 255.0
    zp = int(np.clip(-128.0 - round_half_away(lo / scale), -128, 127))
    return QuantParams(scale=scale, zero_point=zp,
                       scheme=QScheme.ASYMMETRIC_ACTIVATION)


# ---------------------------------------------------------------------------
# batchnorm folding
# ---------------------------------------------------------------------------

def fold_batchnorm(model: CaeModel) -> CaeModel:
    """Absorb inference-mode batchnorm into the preceding convolution.

    w' = w * gamma/sqrt(var+eps), b' = (b - mean) * gamma/sqrt(var+eps) + beta.
    Requires finalized running statistics. A model without batchnorm layers
    is returned as a plain copy.
    """
    if not model.config.batchnorm:
        return copy_model(model)
    folded_cfg = replace(model.config, batchnorm=False)
    layers: list = []
    src = model.layers
    i = 0
    while i < len(src):
        layer = src[i]
        if isinstance(layer, ConvLayer) and i + 1 < len(src) \
                and isinstance(src[i + 1], BatchNormLayer):
            bn = src[i + 1].params
            inv = bn.gamma.astype(np.float64) / np.sqrt(
                bn.running_var.astype(np.float64) + bn.epsilon)
            w = layer.params.weights.astype(np.float64) * inv[:, None, None, None]
            b = (layer.params.bias.astype(np.float64)
                 - bn.running_mean.astype(np.float64)) * inv \
                + bn.beta.astype(np.float64)
            layers.append(ConvLayer(ConvParams(
                weights=w.astype(np.float32),
                bias=b.astype(np.float32),
                stride=layer.params.stride,
            )))
            i += 2
        elif isinstance(layer, ConvLayer):
            layers.append(ConvLayer(ConvParams(
                weights=layer.params.weights.copy(),
                bias=layer.params.bias.copy(),
                stride=layer.params.stride,
            )))
            i += 1
        elif isinstance(layer, ReluLayer):
            layers.append(ReluLayer())
            i += 1
        else:
            layers.append(UpsampleLayer(layer.factor))
            i += 1
    return CaeModel(config=folded_cfg, layers=layers)


def _folded(model: CaeModel) -> CaeModel:
    return fold_batchnorm(model) if model.config.batchnorm else model


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationStats:
    """Per-site observed ranges plus fixed-bin histograms for percentiles."""

    sites: list[str]
    mins: np.ndarray
    maxs: np.ndarray
    histograms: np.ndarray  # (n_sites, bins) int64 over [mins, maxs]
    bins: int = _HIST_BINS


def site_names(cfg: CaeConfig) -> list[str]:
    n_convs = len(_conv_plan(cfg))
    return ["input"] + [f"act{i}" for i in range(n_convs - 1)] + ["output"]


def _relu_flags(cfg: CaeConfig) -> list[bool]:
    n_convs = len(_conv_plan(cfg))
    return [True] * (n_convs - 1) + [cfg.output_activation == "relu"]


def _float_sites(folded: CaeModel, batch: np.ndarray):
    """Yield every inter-layer tensor of the folded float model, once."""
    yield batch
    h = batch
    convs = folded.convs
    flags = _relu_flags(folded.config)
    for idx, (p, has_relu) in enumerate(zip(convs, flags)):
        if idx == len(convs) - 1:
            h = upsample2d_nearest(h, 2)
        h = conv2d_forward(h, p)
        if has_relu:
            h = relu(h)
        yield h


def _as_batch(patches, size: int) -> np.ndarray:
    if isinstance(patches, np.ndarray):
        arr = patches
        if arr.ndim == 2:
            arr = arr[None, None]
        if arr.ndim != 4:
            raise ShapeError(f"patch array must be 2-D or 4-D, got {arr.ndim}-D")
    else:
        arr = np.stack([p.pixels for p in patches])[:, None]
    if arr.shape[1] != 1 or arr.shape[2:] != (size, size):
        raise ShapeError(f"patches are {arr.shape}, model wants (N, 1, {size}, {size})")
    return np.ascontiguousarray(arr, dtype=np.float32)


def calibrate(model: CaeModel, calibration_patches, batch_size: int = 16) -> CalibrationStats:
    """Observe per-site min/max and histograms over calibration forwards.

    Runs the folded model in inference mode. Histograms take a second pass
    over the data using the observed ranges as fixed bin edges.
    """
    if isinstance(calibration_patches, np.ndarray):
        n = calibration_patches.shape[0] if calibration_patches.ndim == 4 else 1
    else:
        calibration_patches = list(calibration_patches)
        n = len(calibration_patches)
    if n == 0:
        raise ArgError("calibration set is empty")
    folded = _folded(model)
    batch = _as_batch(calibration_patches, folded.config.input_size)
    names = site_names(folded.config)
    mins = np.full(len(names), np.inf)
    maxs = np.full(len(names), -np.inf)
    for lo in range(0, batch.shape[0], batch_size):
        for i, t in enumerate(_float_sites(folded, batch[lo:lo + batch_size])):
            mins[i] = min(mins[i], float(t.min()))
            maxs[i] = max(maxs[i], float(t.max()))
    hists = np.zeros((len(names), _HIST_BINS), dtype=np.int64)
    for lo in range(0, batch.shape[0], batch_size):
        for i, t in enumerate(_float_sites(folded, batch[lo:lo + batch_size])):
            if maxs[i] > mins[i]:
                hists[i] += np.histogram(t, bins=_HIST_BINS, range=(mins[i], maxs[i]))[0]
            else:
                hists[i, 0] += t.size
    return CalibrationStats(sites=names, mins=mins, maxs=maxs, histograms=hists)


def _site_range(stats: CalibrationStats, idx: int, mode: str) -> tuple[float, float]:
    lo, hi = float(stats.mins[idx]), float(stats.maxs[idx])
    if mode == MODE_MINMAX or lo == hi:
        return lo, hi
    if mode != MODE_PERCENTILE:
        raise ArgError(f"unknown calibration mode {mode!r}")
    hist = stats.histograms[idx]
    total = int(hist.sum())
    if total == 0:
        return lo, hi
    edges = np.linspace(lo, hi, stats.bins + 1)
    cum = np.cumsum(hist)
    lo_count = total * _PERCENTILE_TAIL
    hi_count = total * (1.0 - _PERCENTILE_TAIL)
    lo_bin = int(np.searchsorted(cum, lo_count, side="left"))
    hi_bin = int(np.searchsorted(cum, hi_count, side="left"))
    plo = float(edges[min(lo_bin, stats.bins - 1)])
    phi = float(edges[min(hi_bin, stats.bins - 1) + 1])
    if phi <= plo:
        return lo, hi
    return plo, phi


# ---------------------------------------------------------------------------
# quantized model and the two inference paths
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv_int(xpad, w, stride, out):
    n_, oc, oh, ow = out.shape
    ic, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    span = (ow - 1) * stride + 1
    for n in range(n_):
        for o in range(oc):
            for i in range(oh):
                orow = out[n, o, i]
                for j in range(ow):
                    orow[j] = 0
            for c in range(ic):
                xplane = xpad[n, c]
                for u in range(kh):
                    for v in range(kw):
                        wv = np.int32(w[o, c, u, v])
                        for i in range(oh):
                            orow = out[n, o, i]
                            if stride == 1:
                                xs = xplane[i + u, v:v + ow]
                                for j in range(ow):
                                    orow[j] += np.int32(xs[j]) * wv
                            else:
                                xs = xplane[i * stride + u, v:v + span:stride]
                                for j in range(ow):
                                    orow[j] += np.int32(xs[j]) * wv


@dataclass
class QConvLayer:
    """One integer convolution: INT8 weights, INT32 bias, requant multiplier."""

    weights_q: np.ndarray  # int8 (outC, inC, k, k)
    weight_qp: QuantParams
    bias_q: np.ndarray  # int32 (outC,) at scale input_scale * weight_scale
    act_qp: QuantParams  # output site
    multiplier: float  # input_scale * weight_scale / output_scale
    stride: int
    relu: bool
    weights_i16: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights_q = np.ascontiguousarray(self.weights_q, dtype=np.int8)
        self.bias_q = np.ascontiguousarray(self.bias_q, dtype=np.int32)
        self.weights_i16 = self.weights_q.astype(np.int16)


@dataclass
class QuantizedModel:
    config: CaeConfig  # folded topology (batchnorm off)
    input_qp: QuantParams
    layers: list[QConvLayer]


def quantize_model(model: CaeModel, stats: CalibrationStats,
                   mode: str = MODE_MINMAX) -> QuantizedModel:
    """Post-training quantization of a trained (or fine-tuned) float model."""
    folded = _folded(model)
    names = site_names(folded.config)
    if list(stats.sites) != names:
        raise ArgError(
            f"calibration stats cover sites {stats.sites}, model needs {names}"
        )
    act_qps = [
        activation_params(*_site_range(stats, i, mode)) for i in range(len(names))
    ]
    input_qp = act_qps[0]
    flags = _relu_flags(folded.config)
    layers: list[QConvLayer] = []
    s_in = input_qp.scale
    for idx, p in enumerate(folded.convs):
        wp = weight_params(p.weights)
        out_qp = act_qps[idx + 1]
        bias_scale = s_in * wp.scale
        bias_q = np.clip(
            round_half_away(p.bias.astype(np.float64) / bias_scale),
            np.iinfo(np.int32).min, np.iinfo(np.int32).max,
        ).astype(np.int32)
        layers.append(QConvLayer(
            weights_q=quantize_tensor(p.weights, wp),
            weight_qp=wp,
            bias_q=bias_q,
            act_qp=out_qp,
            multiplier=bias_scale / out_qp.scale,
            stride=p.stride,
            relu=flags[idx],
        ))
        s_in = out_qp.scale
    return QuantizedModel(config=folded.config, input_qp=input_qp, layers=layers)


def _requant(acc: np.ndarray, multiplier: float, qp: QuantParams,
             apply_relu: bool) -> np.ndarray:
    """INT32-scale accumulator -> INT8 activation lattice, shared by both paths."""
    q = round_half_away(np.asarray(acc, dtype=np.float64) * multiplier) + qp.zero_point
    q = np.clip(q, -128, 127)
    if apply_relu:
        q = np.maximum(q, float(qp.zero_point))
    return q


def _check_qinput(qm: QuantizedModel, x: np.ndarray) -> tuple[np.ndarray, bool]:
    size = qm.config.input_size
    squeezed = x.ndim == 2
    if squeezed:
        x = x[None, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (size, size):
        raise ShapeError(f"quantized model expects (N, 1, {size}, {size}) or "
                         f"({size}, {size}) input, got {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float32), squeezed


def qforward(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Pure-integer inference; returns the dequantized reconstruction.

    Input patches are quantized to the calibrated input lattice; every layer
    is INT8 x INT8 -> INT32 accumulation, INT32 bias add, float64 requant
    with half-away-from-zero rounding, and integer-domain ReLU (clamp at the
    zero point). Bit-exact across platforms.
    """
    xb, squeezed = _check_qinput(qm, x)
    q = quantize_tensor(xb, qm.input_qp)
    shifted = q.astype(np.int16) - np.int16(qm.input_qp.zero_point)
    last = len(qm.layers) - 1
    for idx, layer in enumerate(qm.layers):
        if idx == last:
            shifted = upsample2d_nearest(shifted, 2)
        xpad = _same_pad(shifted, layer.weights_q.shape[2])
        oh, ow = conv_output_shape(shifted.shape[2], shifted.shape[3], layer.stride)
        acc = np.empty((shifted.shape[0], layer.weights_q.shape[0], oh, ow),
                       dtype=np.int32)
        _conv_int(xpad, layer.weights_i16, layer.stride, acc)
        acc64 = acc.astype(np.int64) + layer.bias_q.astype(np.int64)[None, :, None, None]
        q = _requant(acc64, layer.multiplier, layer.act_qp, layer.relu)
        shifted = (q - float(layer.act_qp.zero_point)).astype(np.int16)
    out_qp = qm.layers[-1].act_qp
    recon = (shifted.astype(np.float64) * out_qp.scale).astype(np.float32)
    return recon[0, 0] if squeezed else recon


def qforward_reference(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Fake-quant float simulation of ``qforward``; must match it bitwise.

    Carries lattice coordinates in float64 (exact integers), runs the float
    convolution kernel, and shares the requantization helper, so the only
    difference from the integer path is the arithmetic carrier.
    """
    xb, squeezed = _check_qinput(qm, x)
    q = quantize_tensor(xb, qm.input_qp)
    shifted = q.astype(np.float64) - float(qm.input_qp.zero_point)
    last = len(qm.layers) - 1
    for idx, layer in enumerate(qm.layers):
        if idx == last:
            shifted = upsample2d_nearest(shifted, 2)
        w = layer.weights_q.astype(np.float64)
        p = ConvParams(weights=w, bias=np.zeros(w.shape[0]), stride=layer.stride)
        acc = conv2d_forward(shifted, p)
        acc += layer.bias_q.astype(np.float64)[None, :, None, None]
        q = _requant(acc, layer.multiplier, layer.act_qp, layer.relu)
        shifted = q - float(layer.act_qp.zero_point)
    out_qp = qm.layers[-1].act_qp
    recon = (shifted * out_qp.scale).astype(np.float32)
    return recon[0, 0] if squeezed else recon


# ---------------------------------------------------------------------------
# fake-quant fine-tuning
# ---------------------------------------------------------------------------

def _weight_qdq(w: np.ndarray) -> np.ndarray:
    wp = weight_params(w)
    return dequantize_tensor(quantize_tensor(w, wp), wp, dtype=w.dtype)


def _act_qdq(h: np.ndarray, qp: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = representable_range(qp)
    hq = dequantize_tensor(quantize_tensor(h, qp), qp, dtype=h.dtype)
    return hq, (h >= lo) & (h <= hi)


def finetune_quantized(
    model: CaeModel,
    stats: CalibrationStats,
    split,
    epochs: int = 50,
    lr: float = 1e-4,
    batch_size: int = 16,
    seed: int = 0,
    mode: str = MODE_MINMAX,
) -> CaeModel:
    """Fake-quant training to recover post-quantization accuracy.

    Weights and activations pass through quantize-dequantize in the forward
    pass (weight scales track the current weights; activation scales stay
    frozen at the calibrated ranges). Gradients use the straight-through
    estimator, zeroed where an activation fell outside its representable
    range. Returns a folded float model ready to quantize again with the
    same stats.
    """
    if epochs < 0:
        raise ArgError(f"epochs must be >= 0, got {epochs}")
    folded = _folded(model)
    if epochs == 0:
        return folded
    if not split.train:
        raise ArgError("training set is empty")
    names = site_names(folded.config)
    if list(stats.sites) != names:
        raise ArgError(f"calibration stats cover {stats.sites}, model needs {names}")
    act_qps = [
        activation_params(*_site_range(stats, i, mode)) for i in range(len(names))
    ]
    flags = _relu_flags(folded.config)
    convs = folded.convs
    size = folded.config.input_size
    x_all = np.stack([p.pixels for p in split.train])[:, None].astype(np.float32)
    if x_all.shape[2:] != (size, size):
        raise ShapeError(f"patches are {x_all.shape}, model wants {size}x{size}")
    params: list[np.ndarray] = []
    for p in convs:
        params += [p.weights, p.bias]
    state = init_adam(params, lr)
    n = x_all.shape[0]
    last = len(convs) - 1
    for epoch in range(epochs):
        perm = np.random.default_rng((seed, epoch, 1)).permutation(n)
        for lo in range(0, n, batch_size):
            xb = np.ascontiguousarray(x_all[perm[lo:lo + batch_size]])
            h, _ = _act_qdq(xb, act_qps[0])
            caches = []
            for idx, p in enumerate(convs):
                upsampled = idx == last
                if upsampled:
                    h = upsample2d_nearest(h, 2)
                pq = ConvParams(weights=_weight_qdq(p.weights), bias=p.bias,
                                stride=p.stride)
                c_in = h
                c_out = conv2d_forward(h, pq)
                r_out = relu(c_out) if flags[idx] else c_out
                h, mask = _act_qdq(r_out, act_qps[idx + 1])
                caches.append((c_in, pq, c_out, mask, upsampled))
            loss, grad = mse_loss(xb, h)
            if not np.isfinite(loss):
                raise DivergedError(f"non-finite fine-tune loss at epoch {epoch}")
            grads: list[np.ndarray] = []
            for idx in range(last, -1, -1):
                c_in, pq, c_out, mask, upsampled = caches[idx]
                grad = grad * mask
                if flags[idx]:
                    grad = relu_backward(c_out, grad)
                grad, gw, gb = conv2d_backward(c_in, pq, grad)
                grads = [gw, gb] + grads
                if upsampled:
                    grad = upsample2d_nearest_backward(grad, 2)
            adam_step(params, grads, state)
    return folded


# ---------------------------------------------------------------------------
# CAEQ serialization
# ---------------------------------------------------------------------------

def _config_block(qm: QuantizedModel) -> bytes:
    text = qm.config.to_text()
    text += f"input_scale_hex={float(qm.input_qp.scale).hex()}\n"
    text += f"input_zero_point={qm.input_qp.zero_point}\n"
    return text.encode("utf-8")


def save_quantized(qm: QuantizedModel, path) -> None:
    """CAEQ container: per layer, weight params, INT8 weights, INT32 biases,
    activation params, requant multiplier. Little-endian throughout."""
    try:
        with open(path, "wb") as fh:
            block = _config_block(qm)
            fh.write(struct.pack("<4sII", CAEQ_MAGIC, CAEQ_VERSION, len(block)))
            fh.write(block)
            for layer in qm.layers:
                fh.write(struct.pack("<di", layer.weight_qp.scale,
                                     layer.weight_qp.zero_point))
                fh.write(layer.weights_q.tobytes())
                fh.write(layer.bias_q.astype("<i4").tobytes())
                fh.write(struct.pack("<di", layer.act_qp.scale,
                                     layer.act_qp.zero_point))
                fh.write(struct.pack("<d", layer.multiplier))
    except OSError as exc:
        raise IoError(f"cannot write quantized model to {path}: {exc}") from exc


def load_quantized(path) -> QuantizedModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read quantized model from {path}: {exc}") from exc
    if len(blob) < 12:
        raise FormatError(f"{path}: shorter than the CAEQ header")
    magic, version, cfg_len = struct.unpack_from("<4sII", blob, 0)
    if magic != CAEQ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CAEQ_VERSION:
        raise FormatError(f"{path}: unsupported CAEQ version {version}")
    if len(blob) < 12 + cfg_len:
        raise FormatError(f"{path}: truncated config block")
    lines = blob[12:12 + cfg_len].decode("utf-8").splitlines()
    extras = {}
    cfg_lines = []
    for line in lines:
        key, _, value = line.partition("=")
        if key in ("input_scale_hex", "input_zero_point"):
            extras[key] = value
        else:
            cfg_lines.append(line)
    try:
        cfg = CaeConfig.from_text("\n".join(cfg_lines))
        input_qp = QuantParams(
            scale=float.fromhex(extras["input_scale_hex"]),
            zero_point=int(extras["input_zero_point"]),
            scheme=QScheme.ASYMMETRIC_ACTIVATION,
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: invalid config block: {exc}") from exc
    cfg = replace(cfg, batchnorm=False)
    plan = _conv_plan(cfg)
    flags = _relu_flags(cfg)
    offset = 12 + cfg_len
    layers: list[QConvLayer] = []

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"{path}: truncated layer payload")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    for idx, (cin, cout, stride) in enumerate(plan):
        ws, wz = struct.unpack("<di", take(12))
        wcount = cout * cin * cfg.kernel * cfg.kernel
        weights_q = np.frombuffer(take(wcount), dtype=np.int8).reshape(
            cout, cin, cfg.kernel, cfg.kernel).copy()
        bias_q = np.frombuffer(take(cout * 4), dtype="<i4").astype(np.int32)
        ascale, azp = struct.unpack("<di", take(12))
        (mult,) = struct.unpack("<d", take(8))
        try:
            layers.append(QConvLayer(
                weights_q=weights_q,
                weight_qp=QuantParams(ws, wz, QScheme.SYMMETRIC_WEIGHT),
                bias_q=bias_q,
                act_qp=QuantParams(ascale, azp, QScheme.ASYMMETRIC_ACTIVATION),
                multiplier=mult,
                stride=stride,
                relu=flags[idx],
            ))
        except ArgError as exc:
            raise FormatError(f"{path}: invalid layer parameters: {exc}") from exc
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return QuantizedModel(config=cfg, input_qp=input_qp, layers=layers)
