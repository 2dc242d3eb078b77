"""The convolutional autoencoder: construction, training, serialization.

The topology is fixed: three encoder convolutions (the second with stride 2),
two decoder convolutions, nearest-neighbor upsampling back to full size, and
a single-filter output convolution. Batch normalization sits between every
convolution pair. All six convolutions share one odd kernel size, so the
output always matches the input shape.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgError, ConfigError, DivergedError, FormatError, IoError
from .kernels import (
    AdamState,
    BatchNormParams,
    ConvParams,
    adam_step,
    batchnorm_forward,
    batchnorm_backward,
    batchnorm_params,
    conv2d_backward,
    conv2d_forward,
    init_adam,
    mse_loss,
    relu,
    relu_backward,
    upsample2d_nearest,
    upsample2d_nearest_backward,
)

CAEW_MAGIC = b"CAEW"
CAEW_VERSION = 1


@dataclass
class CaeConfig:
    """Architecture knobs. Defaults reproduce the full-scale detector."""

    input_size: int = 144
    encoder_filters: tuple[int, ...] = (128, 256, 512)
    decoder_filters: tuple[int, ...] | None = None
    kernel: int = 3
    stride2_layer_index: int = 1
    output_activation: str = "relu"
    batchnorm: bool = True

    def __post_init__(self):
        self.encoder_filters = tuple(int(f) for f in self.encoder_filters)
        if len(self.encoder_filters) != 3:
            raise ConfigError(
                f"encoder needs exactly 3 filter widths (6 conv layers total), "
                f"got {self.encoder_filters}"
            )
        if any(f < 1 for f in self.encoder_filters):
            raise ConfigError(f"filter widths must be positive: {self.encoder_filters}")
        mirror = tuple(reversed(self.encoder_filters[:-1]))
        if self.decoder_filters is None:
            self.decoder_filters = mirror
        else:
            self.decoder_filters = tuple(int(f) for f in self.decoder_filters)
            if self.decoder_filters != mirror:
                raise ConfigError(
                    f"decoder filters {self.decoder_filters} are not the mirror "
                    f"{mirror} of the encoder"
                )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.input_size < 2 or self.input_size % 2:
            raise ConfigError(f"input size must be even and >= 2, got {self.input_size}")
        if not 0 <= self.stride2_layer_index < len(self.encoder_filters):
            raise ConfigError(f"stride-2 index {self.stride2_layer_index} out of range")
        if self.output_activation not in ("relu", "linear"):
            raise ConfigError(f"output activation must be relu or linear, got "
                              f"{self.output_activation!r}")

    def to_text(self) -> str:
        lines = [
            f"input_size={self.input_size}",
            "encoder_filters=" + ",".join(str(f) for f in self.encoder_filters),
            "decoder_filters=" + ",".join(str(f) for f in self.decoder_filters),
            f"kernel={self.kernel}",
            f"stride2_layer_index={self.stride2_layer_index}",
            f"output_activation={self.output_activation}",
            f"batchnorm={'true' if self.batchnorm else 'false'}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CaeConfig":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key] = value
        try:
            return cls(
                input_size=int(fields["input_size"]),
                encoder_filters=tuple(int(x) for x in fields["encoder_filters"].split(",")),
                decoder_filters=tuple(int(x) for x in fields["decoder_filters"].split(",")),
                kernel=int(fields["kernel"]),
                stride2_layer_index=int(fields["stride2_layer_index"]),
                output_activation=fields["output_activation"],
                batchnorm=fields["batchnorm"] == "true",
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed model config block: {exc}") from exc


@dataclass
class ConvLayer:
    params: ConvParams


@dataclass
class BatchNormLayer:
    params: BatchNormParams


@dataclass
class ReluLayer:
    pass


@dataclass
class UpsampleLayer:
    factor: int


@dataclass
class CaeModel:
    config: CaeConfig
    layers: list = field(default_factory=list)

    @property
    def convs(self) -> list[ConvParams]:
        return [l.params for l in self.layers if isinstance(l, ConvLayer)]


def _conv_plan(cfg: CaeConfig) -> list[tuple[int, int, int]]:
    """(in_channels, out_channels, stride) per convolution, topology order."""
    plan = []
    prev = 1
    for i, width in enumerate(cfg.encoder_filters):
        plan.append((prev, width, 2 if i == cfg.stride2_layer_index else 1))
        prev = width
    for width in cfg.decoder_filters:
        plan.append((prev, width, 1))
        prev = width
    plan.append((prev, 1, 1))
    return plan


def build_model(cfg: CaeConfig, seed: int) -> CaeModel:
    """He-uniform initialized model; bit-identical for identical seeds."""
    rng = np.random.default_rng(seed)
    plan = _conv_plan(cfg)
    layers: list = []
    for idx, (cin, cout, stride) in enumerate(plan):
        last = idx == len(plan) - 1
        if last:
            layers.append(UpsampleLayer(factor=2))
        bound = np.sqrt(6.0 / (cin * cfg.kernel * cfg.kernel))
        weights = rng.uniform(-bound, bound, (cout, cin, cfg.kernel, cfg.kernel))
        layers.append(ConvLayer(ConvParams(
            weights=weights.astype(np.float32),
            bias=np.zeros(cout, dtype=np.float32),
            stride=stride,
        )))
        if last:
            if cfg.output_activation == "relu":
                layers.append(ReluLayer())
        else:
            if cfg.batchnorm:
                layers.append(BatchNormLayer(batchnorm_params(cout)))
            layers.append(ReluLayer())
    return CaeModel(config=cfg, layers=layers)


def copy_model(model: CaeModel) -> CaeModel:
    return copy.deepcopy(model)


def param_count(model: CaeModel) -> int:
    """Trainable scalars: conv weights and biases plus BN gamma and beta."""
    total = 0
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            total += layer.params.weights.size + layer.params.bias.size
        elif isinstance(layer, BatchNormLayer):
            total += layer.params.gamma.size + layer.params.beta.size
    return total


def trainable_params(model: CaeModel) -> list[np.ndarray]:
    params: list[np.ndarray] = []
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            params += [layer.params.weights, layer.params.bias]
        elif isinstance(layer, BatchNormLayer):
            params += [layer.params.gamma, layer.params.beta]
    return params


def _state_arrays(model: CaeModel) -> list[np.ndarray]:
    """Every persistent tensor in topology order (includes BN running stats)."""
    arrays: list[np.ndarray] = []
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            arrays += [layer.params.weights, layer.params.bias]
        elif isinstance(layer, BatchNormLayer):
            p = layer.params
            arrays += [p.gamma, p.beta, p.running_mean, p.running_var]
    return arrays


def _check_input(model: CaeModel, batch: np.ndarray) -> None:
    size = model.config.input_size
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (size, size):
        from .errors import ShapeError

        raise ShapeError(
            f"model expects (N, 1, {size}, {size}) input, got {batch.shape}"
        )


def _layer_forward(layer, x, mode: str, update_running: bool):
    if isinstance(layer, ConvLayer):
        return conv2d_forward(x, layer.params)
    if isinstance(layer, BatchNormLayer):
        return batchnorm_forward(x, layer.params, mode, update_running=update_running)
    if isinstance(layer, ReluLayer):
        return relu(x)
    return upsample2d_nearest(x, layer.factor)


def forward(model: CaeModel, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Run the autoencoder. Never mutates the model (even in train mode)."""
    if mode not in ("train", "infer"):
        raise ArgError(f"mode must be 'train' or 'infer', got {mode!r}")
    _check_input(model, batch)
    h = np.ascontiguousarray(batch)
    for layer in model.layers:
        h = _layer_forward(layer, h, mode, update_running=False)
    return h


def _forward_tape(model, x, update_running: bool):
    caches = []
    h = x
    for layer in model.layers:
        caches.append((layer, h))
        h = _layer_forward(layer, h, "train", update_running)
    return h, caches


def _backward_tape(caches, grad):
    grads_by_layer: dict[int, tuple] = {}
    for layer, inp in reversed(caches):
        if isinstance(layer, ConvLayer):
            grad, gw, gb = conv2d_backward(inp, layer.params, grad)
            grads_by_layer[id(layer)] = (gw, gb)
        elif isinstance(layer, BatchNormLayer):
            grad, ggamma, gbeta = batchnorm_backward(inp, layer.params, grad)
            grads_by_layer[id(layer)] = (ggamma, gbeta)
        elif isinstance(layer, ReluLayer):
            grad = relu_backward(inp, grad)
        else:
            grad = upsample2d_nearest_backward(grad, layer.factor)
    return grads_by_layer, grad


def _flatten_grads(model, grads_by_layer) -> list[np.ndarray]:
    grads: list[np.ndarray] = []
    for layer in model.layers:
        if isinstance(layer, (ConvLayer, BatchNormLayer)):
            grads += list(grads_by_layer[id(layer)])
    return grads


def make_mse_closure(model: CaeModel):
    """Adapt the model to ``finite_diff_check``: params in, (loss, grads) out.

    The returned function reconstructs its input batch, scores it with MSE,
    and never touches running statistics, so it is side-effect free.
    """
    clone = copy_model(model)

    def model_fn(params: list[np.ndarray], x: np.ndarray):
        for target, src in zip(trainable_params(clone), params):
            if target.shape != src.shape:
                raise ArgError("parameter list does not match model topology")
        slots = [l for l in clone.layers if isinstance(l, (ConvLayer, BatchNormLayer))]
        it = iter(params)
        for layer in slots:
            if isinstance(layer, ConvLayer):
                layer.params.weights = next(it)
                layer.params.bias = next(it)
            else:
                layer.params.gamma = next(it)
                layer.params.beta = next(it)
        xin = x.astype(params[0].dtype)
        out, caches = _forward_tape(clone, xin, update_running=False)
        loss, grad = mse_loss(xin, out)
        grads_by_layer, _ = _backward_tape(caches, grad)
        return loss, _flatten_grads(clone, grads_by_layer)

    return model_fn


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 0.001
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


def _stack_patches(patches, size: int) -> np.ndarray:
    from .errors import ShapeError

    for p in patches:
        if p.pixels.shape != (size, size):
            raise ShapeError(
                f"patch {p.source} is {p.pixels.shape}, model wants {(size, size)}"
            )
    return np.stack([p.pixels for p in patches]).reshape(-1, 1, size, size)


def train(
    model: CaeModel,
    split,
    tc: TrainConfig,
    checkpoint_dir=None,
    resume_from=None,
) -> tuple[CaeModel, list[float]]:
    """Minimize reconstruction MSE with Adam over the training patches.

    Deterministic given the seed: the per-epoch shuffle stream depends only
    on (seed, epoch), so a run resumed from a checkpoint reproduces the
    remaining epoch losses bit for bit. Returns the model (mutated in place)
    and one mean loss per epoch.
    """
    if not split.train:
        raise ArgError("training set is empty")
    x_all = _stack_patches(split.train, model.config.input_size)
    params = trainable_params(model)
    state = init_adam(params, tc.lr)
    history: list[float] = []
    start_epoch = 0
    if resume_from is not None:
        start_epoch, history = _load_checkpoint(model, state, resume_from)
    n = x_all.shape[0]
    for epoch in range(start_epoch, tc.epochs):
        perm = np.random.default_rng((tc.seed, epoch)).permutation(n)
        sq_sum = 0.0
        for lo in range(0, n, tc.batch_size):
            xb = np.ascontiguousarray(x_all[perm[lo:lo + tc.batch_size]])
            out, caches = _forward_tape(model, xb, update_running=True)
            loss, grad = mse_loss(xb, out)
            if not np.isfinite(loss):
                raise DivergedError(f"non-finite loss at epoch {epoch}")
            grads_by_layer, _ = _backward_tape(caches, grad)
            adam_step(params, _flatten_grads(model, grads_by_layer), state)
            sq_sum += loss * xb.size
        history.append(sq_sum / x_all.size)
        if checkpoint_dir is not None and tc.checkpoint_every > 0 \
                and (epoch + 1) % tc.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1:05d}.npz"
            _save_checkpoint(model, state, epoch + 1, history, path)
    return model, history


def _save_checkpoint(model, state: AdamState, next_epoch: int, history, path) -> None:
    arrays = {f"state_{i}": a for i, a in enumerate(_state_arrays(model))}
    arrays.update({f"adam_m_{i}": a for i, a in enumerate(state.m)})
    arrays.update({f"adam_v_{i}": a for i, a in enumerate(state.v)})
    try:
        np.savez(
            path,
            config=np.frombuffer(model.config.to_text().encode(), dtype=np.uint8),
            next_epoch=np.int64(next_epoch),
            adam_t=np.int64(state.t),
            history=np.asarray(history, dtype=np.float64),
            **arrays,
        )
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def _load_checkpoint(model, state: AdamState, path) -> tuple[int, list[float]]:
    try:
        with np.load(path) as data:
            cfg_text = bytes(data["config"]).decode()
            if cfg_text != model.config.to_text():
                raise FormatError(f"checkpoint {path} was written for a different topology")
            for i, target in enumerate(_state_arrays(model)):
                target[...] = data[f"state_{i}"]
            for i in range(len(state.m)):
                state.m[i][...] = data[f"adam_m_{i}"]
                state.v[i][...] = data[f"adam_v_{i}"]
            state.t = int(data["adam_t"])
            return int(data["next_epoch"]), list(data["history"])
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    except KeyError as exc:
        raise FormatError(f"checkpoint {path} is missing field {exc}") from exc


def save_weights(model: CaeModel, path) -> None:
    """CAEW container: magic, version, config text block, float32 tensors.

    Tensors appear in topology order (weights, bias, then BN gamma, beta,
    running mean, running variance per block), little-endian.
    """
    cfg = model.config.to_text().encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", CAEW_MAGIC, CAEW_VERSION, len(cfg)))
            fh.write(cfg)
            for arr in _state_arrays(model):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write weights to {path}: {exc}") from exc


def load_weights(path, into: CaeModel | None = None) -> CaeModel:
    """Rebuild a model from a CAEW file.

    With ``into`` given, tensors are loaded into that model; its topology
    must match the file's config block exactly.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read weights from {path}: {exc}") from exc
    if len(blob) < 12:
        raise FormatError(f"{path}: shorter than the CAEW header")
    magic, version, cfg_len = struct.unpack_from("<4sII", blob, 0)
    if magic != CAEW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CAEW_VERSION:
        raise FormatError(f"{path}: unsupported CAEW version {version}")
    if len(blob) < 12 + cfg_len:
        raise FormatError(f"{path}: truncated config block")
    cfg_text = blob[12:12 + cfg_len].decode("utf-8")
    try:
        cfg = CaeConfig.from_text(cfg_text)
    except ConfigError as exc:
        raise FormatError(f"{path}: invalid config block: {exc}") from exc
    if into is None:
        model = build_model(cfg, seed=0)
    else:
        if into.config.to_text() != cfg_text:
            raise FormatError(f"{path}: topology does not match the target model")
        model = into
    offset = 12 + cfg_len
    for arr in _state_arrays(model):
        nbytes = arr.size * 4
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated tensor payload")
        arr[...] = np.frombuffer(blob, dtype="<f4", count=arr.size,
                                 offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after tensors")
    return model
