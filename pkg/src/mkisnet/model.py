"""Multi-kernel fully convolutional segmentation network.

Topology::

    input block   conv k x k (k in input_kernels) -> BN, summed, ReLU
    block i       conv k x k (k in block_kernels, stride 2 if i in stride2_blocks)
                  -> BN, summed, ReLU           (i = 1 .. num_blocks)
    output block  dropout -> [transposed conv 4x4 stride 2 -> BN -> ReLU] x decoder_stages
                  -> 1x1 conv (+bias) -> channel softmax
"""
from __future__ import annotations

import dataclasses
import io
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import modelfile
from .errors import ConfigError, GeometryError, ModelFileError
from .tensor import (
    RunningStats,
    Tensor,
    add_n,
    batch_norm,
    conv2d,
    conv_transpose2d,
    dropout,
    relu,
    softmax_channels,
)


@dataclass
class ModelConfig:
    in_channels: int = 3
    width: int = 24
    input_kernels: tuple = (3, 5, 7, 11)
    block_kernels: tuple = (3, 5)
    num_blocks: int = 6
    stride2_blocks: tuple = (2, 4)
    decoder_kernel: int = 4
    decoder_stages: int = 2
    dropout_p: float = 0.4
    num_classes: int = 2
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_kernels = tuple(int(k) for k in self.input_kernels)
        self.block_kernels = tuple(int(k) for k in self.block_kernels)
        self.stride2_blocks = tuple(sorted({int(b) for b in self.stride2_blocks}))

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.input_kernels or not self.block_kernels:
            raise ConfigError("kernel lists must be non-empty")
        for k in self.input_kernels + self.block_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"branch kernel sizes must be odd and positive, got {k}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        bad = [b for b in self.stride2_blocks if not 1 <= b <= self.num_blocks]
        if bad:
            raise ConfigError(f"stride2_blocks {bad} outside 1..{self.num_blocks}")
        if self.decoder_stages != len(self.stride2_blocks):
            raise ConfigError(
                f"decoder_stages ({self.decoder_stages}) must equal the number of stride-2 blocks "
                f"({len(self.stride2_blocks)})"
            )
        if self.decoder_kernel < 2 or self.decoder_kernel % 2:
            # even kernels with padding (k - 2) / 2 exactly double the resolution
            raise ConfigError(f"decoder_kernel must be even and >= 2, got {self.decoder_kernel}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.bn_epsilon <= 0 or not 0 < self.bn_momentum < 1:
            raise ConfigError("bn_epsilon must be > 0 and bn_momentum in (0, 1)")
        return self

    @property
    def downsample(self):
        return 2 ** len(self.stride2_blocks)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key in ("input_kernels", "block_kernels", "stride2_blocks"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    parameters: "OrderedDict[str, Tensor]"
    bn_running_stats: "OrderedDict[str, RunningStats]" = field(default_factory=OrderedDict)

    @property
    def dtype(self):
        return next(iter(self.parameters.values())).dtype

    def num_parameters(self):
        return sum(p.size for p in self.parameters.values())

    def zero_grad(self):
        for p in self.parameters.values():
            p.grad = None

    def set_trainable(self, flag=True):
        for p in self.parameters.values():
            p.requires_grad = flag

    def _bn(self, x, name, mode):
        cfg = self.config
        return batch_norm(
            x,
            self.parameters[name + ".gamma"],
            self.parameters[name + ".beta"],
            self.bn_running_stats[name],
            mode=mode,
            eps=cfg.bn_epsilon,
            momentum=cfg.bn_momentum,
        )

    def _multi_kernel(self, x, prefix, kernels, stride, mode):
        branches = []
        for k in kernels:
            y = conv2d(x, self.parameters[f"{prefix}.k{k}.conv"], stride=stride, padding=(k - 1) // 2)
            branches.append(self._bn(y, f"{prefix}.k{k}.bn", mode))
        return relu(add_n(branches))

    def encode(self, x, mode="infer", return_stages=False):
        """Run the input block and the multi-kernel blocks."""
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        h = self._multi_kernel(x, "input", cfg.input_kernels, 1, mode)
        stages = [h]
        for i in range(1, cfg.num_blocks + 1):
            stride = 2 if i in cfg.stride2_blocks else 1
            h = self._multi_kernel(h, f"block{i}", cfg.block_kernels, stride, mode)
            stages.append(h)
        return (h, stages) if return_stages else h

    def forward_logits(self, x, mode="infer", rng_seed=0, dropout_mask=None):
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if x.data.ndim != 4:
            raise GeometryError(f"input must be B x C x H x W, got shape {x.shape}")
        B, C, H, W = x.shape
        if C != cfg.in_channels:
            raise GeometryError(f"input has {C} channels, model expects {cfg.in_channels}")
        m = cfg.downsample
        if H % m or W % m:
            raise GeometryError(f"input {H}x{W} is not divisible by {m}; pad the image (see data.pad_to_multiple)")
        h = self.encode(x, mode)
        h = dropout(h, cfg.dropout_p, mode=mode, rng_seed=rng_seed, mask=dropout_mask)
        for j in range(1, cfg.decoder_stages + 1):
            h = conv_transpose2d(
                h, self.parameters[f"decoder{j}.deconv"], stride=2, padding=(cfg.decoder_kernel - 2) // 2
            )
            h = relu(self._bn(h, f"decoder{j}.bn", mode))
        return conv2d(h, self.parameters["classifier.weight"], bias=self.parameters["classifier.bias"])

    def forward(self, x, mode="infer", rng_seed=0, dropout_mask=None):
        """Per-pixel class probabilities, shape B x num_classes x H x W."""
        return softmax_channels(self.forward_logits(x, mode, rng_seed, dropout_mask))

    def state_tensors(self):
        out = OrderedDict((name, p.data) for name, p in self.parameters.items())
        for name, rs in self.bn_running_stats.items():
            out[name + ".running_mean"] = rs.mean
            out[name + ".running_var"] = rs.var
        return out

    def load_state_tensors(self, tensors):
        expected = set(self.state_tensors())
        if set(tensors) != expected:
            missing = sorted(expected - set(tensors))
            extra = sorted(set(tensors) - expected)
            raise ModelFileError(f"tensor set mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in self.parameters.items():
            arr = tensors[name]
            if arr.shape != p.shape:
                raise ModelFileError(f"tensor {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=arr.dtype)
        for name, rs in self.bn_running_stats.items():
            rs.mean = np.array(tensors[name + ".running_mean"])
            rs.var = np.array(tensors[name + ".running_var"])


def forward(model, batch, mode="infer", rng_seed=0):
    return model.forward(batch, mode=mode, rng_seed=rng_seed)


def parameter_shapes(config: ModelConfig):
    """Ordered (name, shape) pairs of every trainable tensor."""
    cfg = config
    shapes = []

    def multi(prefix, kernels, cin):
        for k in kernels:
            shapes.append((f"{prefix}.k{k}.conv", (cfg.width, cin, k, k)))
            shapes.append((f"{prefix}.k{k}.bn.gamma", (cfg.width,)))
            shapes.append((f"{prefix}.k{k}.bn.beta", (cfg.width,)))

    multi("input", cfg.input_kernels, cfg.in_channels)
    for i in range(1, cfg.num_blocks + 1):
        multi(f"block{i}", cfg.block_kernels, cfg.width)
    for j in range(1, cfg.decoder_stages + 1):
        k = cfg.decoder_kernel
        shapes.append((f"decoder{j}.deconv", (cfg.width, cfg.width, k, k)))
        shapes.append((f"decoder{j}.bn.gamma", (cfg.width,)))
        shapes.append((f"decoder{j}.bn.beta", (cfg.width,)))
    shapes.append(("classifier.weight", (cfg.num_classes, cfg.width, 1, 1)))
    shapes.append(("classifier.bias", (cfg.num_classes,)))
    return shapes


def build_model(config: ModelConfig | None = None, rng_seed=0, dtype=np.float32) -> Model:
    config = (config or ModelConfig()).validate()
    rng = np.random.default_rng(rng_seed)
    params = OrderedDict()
    stats = OrderedDict()
    for name, shape in parameter_shapes(config):
        if name.endswith(".gamma"):
            arr = np.ones(shape)
            stats[name[: -len(".gamma")]] = RunningStats.fresh(shape[0], dtype)
        elif name.endswith(".beta") or name == "classifier.bias":
            arr = np.zeros(shape)
        elif name.endswith(".deconv"):
            cin, _, k, _ = shape
            fan_in = cin * (k // 2) ** 2  # taps reaching each output pixel at stride 2
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            gain = 1.0 if name == "classifier.weight" else 6.0  # no ReLU after the classifier
            bound = np.sqrt(gain / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name, dtype=dtype)
    return Model(config, params, stats)


# complexity -------------------------------------------------------------------

def count_parameters(config: ModelConfig) -> int:
    cfg = config
    w = cfg.width
    bn = 2 * w
    n = sum(k * k for k in cfg.input_kernels) * cfg.in_channels * w + len(cfg.input_kernels) * bn
    n += cfg.num_blocks * (sum(k * k for k in cfg.block_kernels) * w * w + len(cfg.block_kernels) * bn)
    n += cfg.decoder_stages * (cfg.decoder_kernel ** 2 * w * w + bn)
    n += w * cfg.num_classes + cfg.num_classes
    return n


def stage_madds(config: ModelConfig, height: int, width_px: int):
    """(stage name, multiply-adds) for every convolution stage at the given input size.

    Convolutions count K*K*Cin*Cout per output pixel; transposed convolutions
    count K*K*Cin*Cout per input pixel (the adjoint of the matching conv).
    """
    cfg = config.validate()
    m = cfg.downsample
    if height % m or width_px % m:
        raise GeometryError(f"{height}x{width_px} is not divisible by {m}")
    w = cfg.width
    h, wd = height, width_px
    stages = [("input", sum(k * k for k in cfg.input_kernels) * cfg.in_channels * w * h * wd)]
    ksq = sum(k * k for k in cfg.block_kernels)
    for i in range(1, cfg.num_blocks + 1):
        if i in cfg.stride2_blocks:
            h, wd = h // 2, wd // 2
        stages.append((f"block{i}", ksq * w * w * h * wd))
    for j in range(1, cfg.decoder_stages + 1):
        stages.append((f"decoder{j}", cfg.decoder_kernel ** 2 * w * w * h * wd))
        h, wd = h * 2, wd * 2
    stages.append(("classifier", w * cfg.num_classes * h * wd))
    return stages


def count_madds(config: ModelConfig, height: int, width_px: int) -> int:
    return sum(n for _, n in stage_madds(config, height, width_px))


def input_branch_receptive_fields(config: ModelConfig):
    return list(config.input_kernels)


def receptive_field(config: ModelConfig):
    """Receptive field after the input block and after each multi-kernel block."""
    cfg = config
    rf, jump = 1, 1
    out = []
    layers = [(max(cfg.input_kernels), 1)]
    layers += [
        (max(cfg.block_kernels), 2 if i in cfg.stride2_blocks else 1) for i in range(1, cfg.num_blocks + 1)
    ]
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
        out.append(rf)
    return out


@dataclass
class ComplexityReport:
    trainable_params: int
    madds: int
    resolution: tuple
    model_size_bytes: int
    per_stage_receptive_field: list
    input_branch_receptive_field: list


def serialized_size(config: ModelConfig) -> int:
    model = build_model(config, rng_seed=0, dtype=np.float32)
    buf = io.BytesIO()
    modelfile.dump(buf, _file_config(model), model.state_tensors())
    return buf.tell()


def complexity_report(config: ModelConfig, height=64, width_px=64) -> ComplexityReport:
    config.validate()
    return ComplexityReport(
        trainable_params=count_parameters(config),
        madds=count_madds(config, height, width_px),
        resolution=(height, width_px),
        model_size_bytes=serialized_size(config),
        per_stage_receptive_field=receptive_field(config),
        input_branch_receptive_field=input_branch_receptive_fields(config),
    )


# persistence ------------------------------------------------------------------

def _file_config(model):
    return {"model": model.config.to_dict(), "dtype": str(model.dtype)}


def save_model(model: Model, path, section=None) -> int:
    return modelfile.save(path, _file_config(model), model.state_tensors(), section)


def model_from_container(config_block, tensors) -> Model:
    try:
        cfg = ModelConfig.from_dict(config_block["model"])
        dtype = np.dtype(config_block["dtype"])
    except (KeyError, TypeError) as exc:
        raise ModelFileError(f"malformed config block: {exc}") from None
    model = build_model(cfg, rng_seed=0, dtype=dtype)
    model.load_state_tensors(tensors)
    return model


def load_model(path) -> Model:
    config_block, tensors, _ = modelfile.load(path)
    return model_from_container(config_block, tensors)
