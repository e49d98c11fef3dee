"""Pre-activated residual networks with tanh activations for angle regression.

Layer graph::

    stem conv (stride 1) -> 3x3 max pool (stride 2)
      -> stacks of residual blocks
      -> batch norm -> tanh -> global average pool -> dense -> tanh

Each residual block computes ``shortcut + F(x)`` where ``F`` is
``bn -> tanh -> conv -> bn -> tanh -> conv``. A projection shortcut (1x1 conv)
reads the output of the first ``bn -> tanh`` pair; identity shortcuts read the
raw block input.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .serialize import read_tensors, write_tensors
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class StemConfig:
    kernel: int = 7
    stride: int = 1
    pool: bool = True
    channels: int | None = None  # defaults to the first stack width


@dataclass(frozen=True)
class HeadConfig:
    outputs: int = 1
    bias: bool = True


@dataclass(frozen=True)
class ModelConfig:
    name: str = "custom"
    input_size: int = 112
    input_channels: int = 1
    stacks: tuple[int, ...] = (2, 2, 2, 2)
    stack_widths: tuple[int, ...] = (64, 128, 256, 512)
    stem: StemConfig = field(default_factory=StemConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "stacks", tuple(int(s) for s in self.stacks))
        object.__setattr__(self, "stack_widths", tuple(int(w) for w in self.stack_widths))
        if isinstance(self.stem, dict):
            object.__setattr__(self, "stem", StemConfig(**self.stem))
        if isinstance(self.head, dict):
            object.__setattr__(self, "head", HeadConfig(**self.head))
        self.validate()

    @property
    def effective_stacks(self) -> tuple[int, ...]:
        """Block counts up to (excluding) the first zero entry."""
        out = []
        for s in self.stacks:
            if s == 0:
                break
            out.append(s)
        return tuple(out)

    @property
    def effective_widths(self) -> tuple[int, ...]:
        return self.stack_widths[: len(self.effective_stacks)]

    @property
    def stem_channels(self) -> int:
        return self.stem.channels or self.stack_widths[0]

    def validate(self) -> None:
        if len(self.stacks) != len(self.stack_widths):
            raise ConfigError(f"stacks {list(self.stacks)} and stack_widths {list(self.stack_widths)} differ in length")
        if not self.stacks or self.stacks[0] <= 0:
            raise ConfigError("the first stack needs at least one block")
        eff = self.effective_stacks
        if any(s != 0 for s in self.stacks[len(eff):]):
            raise ConfigError(f"non-zero stack after a zero entry in {list(self.stacks)}")
        if any(s < 0 for s in self.stacks):
            raise ConfigError("block counts must be non-negative")
        if any(w <= 0 for w in self.effective_widths):
            raise ConfigError("stack widths must be positive")
        if self.input_size <= 0 or self.input_channels <= 0:
            raise ConfigError("input_size and input_channels must be positive")
        if self.stem.kernel <= 0 or self.stem.stride <= 0:
            raise ConfigError("stem kernel and stride must be positive")
        if self.head.outputs <= 0:
            raise ConfigError("head needs at least one output")
        if not 0.0 <= self.bn_momentum < 1.0 or self.bn_epsilon <= 0:
            raise ConfigError("bn_momentum must be in [0, 1) and bn_epsilon > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"stacks": list(self.stacks), "stack_widths": list(self.stack_widths)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ModelConfig":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except FileNotFoundError:
            raise ConfigError(f"model config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    def scaled(self, width_divisor: int = 1, input_size: int | None = None, name: str | None = None) -> "ModelConfig":
        widths = tuple(max(1, w // width_divisor) for w in self.stack_widths)
        stem = dataclasses.replace(self.stem, channels=None if self.stem.channels is None else max(1, self.stem.channels // width_divisor))
        return dataclasses.replace(
            self,
            name=name or f"{self.name}-w{width_divisor}",
            stack_widths=widths,
            stem=stem,
            input_size=input_size or self.input_size,
        )


RESNET34_112 = ModelConfig(name="resnet34-112", input_size=112, stacks=(3, 4, 6, 3), stack_widths=(64, 128, 256, 512))
RESNET18_112 = ModelConfig(name="resnet18-112", input_size=112, stacks=(2, 2, 2, 2), stack_widths=(64, 128, 256, 512))
# The trailing zero omits the fourth stack; its width entry is never used.
RESNET18_64 = ModelConfig(name="resnet18-64", input_size=64, stacks=(2, 3, 3, 0), stack_widths=(64, 128, 256, 512))

CANONICAL = {c.name: c for c in (RESNET34_112, RESNET18_112, RESNET18_64)}


def resolve_config(spec) -> ModelConfig:
    """Accept a ModelConfig, a canonical name or a JSON path."""
    if isinstance(spec, ModelConfig):
        return spec
    key = str(spec).lower()
    if key in CANONICAL:
        return CANONICAL[key]
    return ModelConfig.load(spec)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Conv:
    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, dtype=np.float32):
        self.stride = stride
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype), decay=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding="same")

    def params(self) -> dict[str, Parameter]:
        return {"weight": self.weight}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class BatchNorm:
    kind = "batch_norm"

    def __init__(self, channels: int, momentum: float, epsilon: float, dtype=np.float32):
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, mode, self.momentum, self.epsilon
        )

    def params(self) -> dict[str, Parameter]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Dense:
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, dtype=np.float32):
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype), decay=True)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)

    def params(self) -> dict[str, Parameter]:
        return {"weight": self.weight} | ({"bias": self.bias} if self.bias is not None else {})

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class ResidualBlock:
    """Pre-activated two-conv residual block."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, momentum: float, epsilon: float, dtype=np.float32):
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.bn1 = BatchNorm(in_ch, momentum, epsilon, dtype)
        self.conv1 = Conv(in_ch, out_ch, 3, stride, dtype)
        self.bn2 = BatchNorm(out_ch, momentum, epsilon, dtype)
        self.conv2 = Conv(out_ch, out_ch, 3, 1, dtype)
        needs_projection = in_ch != out_ch or stride != 1
        self.shortcut = Conv(in_ch, out_ch, 1, stride, dtype) if needs_projection else None

    @property
    def identity(self) -> bool:
        return self.shortcut is None

    def layers(self) -> dict:
        out = {"bn1": self.bn1, "conv1": self.conv1, "bn2": self.bn2, "conv2": self.conv2}
        if self.shortcut is not None:
            out["shortcut"] = self.shortcut
        return out

    def residual(self, x: Tensor, mode: str) -> Tensor:
        """F(x) alone, without the shortcut path."""
        return self._residual_from(T.tanh(self.bn1(x, mode)), mode)

    def _residual_from(self, a: Tensor, mode: str) -> Tensor:
        h = self.conv1(a)
        return self.conv2(T.tanh(self.bn2(h, mode)))

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"block expects {self.in_ch} input channels, got shape {x.shape}")
        a = T.tanh(self.bn1(x, mode))
        skip = x if self.shortcut is None else self.shortcut(a)
        return T.add(skip, self._residual_from(a, mode))


def residual_block_forward(block: ResidualBlock, x: Tensor, mode: str = "infer") -> Tensor:
    return block.forward(x, mode)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """A realized layer graph built from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.mode = "train"
        c = config
        mom, eps = c.bn_momentum, c.bn_epsilon
        self.stem = Conv(c.input_channels, c.stem_channels, c.stem.kernel, c.stem.stride, dtype)
        self.stacks: list[list[ResidualBlock]] = []
        self.shapes: list[tuple[str, tuple[int, int, int]]] = []

        size = T.conv_output_size(c.input_size, c.stem.kernel, c.stem.stride, "same")
        self.shapes.append(("stem.conv", (c.stem_channels, size, size)))
        if c.stem.pool:
            if size < 3:
                raise ConfigError(f"stem pool needs at least 3x3 input, stem produces {size}x{size}")
            size = T.conv_output_size(size, 3, 2, "same")
            self.shapes.append(("stem.pool", (c.stem_channels, size, size)))
        channels = c.stem_channels
        for si, (blocks, width) in enumerate(zip(c.effective_stacks, c.effective_widths)):
            stack = []
            for bi in range(blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                if stride == 2:
                    if size < 2:
                        raise ConfigError(
                            f"input {c.input_size}px underflows: stack {si + 1} would downsample a {size}px map"
                        )
                    size = T.conv_output_size(size, 3, 2, "same")
                stack.append(ResidualBlock(channels, width, stride, mom, eps, dtype))
                channels = width
                self.shapes.append((f"stack{si + 1}.block{bi}", (width, size, size)))
            self.stacks.append(stack)
        self.final_bn = BatchNorm(channels, mom, eps, dtype)
        self.head = Dense(channels, c.head.outputs, c.head.bias, dtype)
        self.shapes.append(("head", (c.head.outputs, 1, 1)))

    # -- structure ---------------------------------------------------------

    def layers(self) -> Iterator[tuple[str, object]]:
        yield "stem.conv", self.stem
        for si, stack in enumerate(self.stacks):
            for bi, block in enumerate(stack):
                for lname, layer in block.layers().items():
                    yield f"stack{si + 1}.block{bi}.{lname}", layer
        yield "final_bn", self.final_bn
        yield "head", self.head

    def blocks(self) -> Iterator[tuple[str, ResidualBlock]]:
        for si, stack in enumerate(self.stacks):
            for bi, block in enumerate(stack):
                yield f"stack{si + 1}.block{bi}", block

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for lname, layer in self.layers():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.layers():
            for bname, b in layer.buffers().items():
                out[f"{lname}.{bname}"] = b
        return out

    def parameter_list(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameter_list():
            p.grad = None

    def weighted_layer_count(self) -> int:
        """Convolutions on the main path plus the dense head (projections excluded)."""
        return 1 + sum(2 * len(stack) for stack in self.stacks) + 1

    def set_mode(self, mode: str) -> "Network":
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        self.mode = mode
        return self

    # -- compute -----------------------------------------------------------

    def forward(self, x, mode: str | None = None) -> Tensor:
        """(N, C, S, S) batch -> (N, outputs) tensor in (-1, 1)."""
        mode = mode or self.mode
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.input_channels, c.input_size, c.input_size):
            raise ShapeError(
                f"expected input (N, {c.input_channels}, {c.input_size}, {c.input_size}), got {x.shape}"
            )
        h = self.stem(x)
        if c.stem.pool:
            h = T.max_pool(h, (3, 3), 2, "same")
        for stack in self.stacks:
            for block in stack:
                h = block.forward(h, mode)
        h = T.tanh(self.final_bn(h, mode))
        return T.tanh(self.head(T.global_avg_pool(h)))

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Infer-mode predictions for the (first) output as a flat array."""
        outs = []
        for i in range(0, len(x), batch_size):
            outs.append(self.forward(Tensor(np.asarray(x[i : i + batch_size], dtype=self.dtype)), "infer").data[:, 0])
        return np.concatenate(outs) if outs else np.zeros(0, dtype=self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        """Snapshot of all parameters and buffers (copies)."""
        return {k: p.data.copy() for k, p in self.named_parameters().items()} | {
            k: b.copy() for k, b in self.named_buffers().items()
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        for name, target in list(params.items()) + list(buffers.items()):
            if name not in state:
                raise FormatError(f"missing tensor {name!r}")
            arr = state[name]
            cur = target.data if isinstance(target, Tensor) else target
            if tuple(arr.shape) != cur.shape:
                raise FormatError(f"tensor {name!r}: shape {tuple(arr.shape)} != expected {cur.shape}")
        for name, p in params.items():
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]

    def describe(self) -> str:
        return describe_network(self)


def build_model(config: ModelConfig, dtype=np.float32) -> Network:
    return Network(resolve_config(config), dtype=dtype)


def count_parameters(network: Network) -> int:
    """Exact number of learnable scalars; running statistics are not counted."""
    return int(sum(p.size for p in network.parameter_list()))


def describe_network(network: Network) -> str:
    rows = []
    shapes = dict(network.shapes)
    for lname, layer in network.layers():
        n = sum(p.size for p in layer.params().values())
        block = lname.rsplit(".", 1)[0]
        out = shapes.get(lname) or shapes.get(block) or ""
        shape = "x".join(str(s) for s in out) if out else ""
        detail = ""
        if isinstance(layer, Conv):
            o, i, k, _ = layer.weight.shape
            detail = f"{k}x{k} {i}->{o} s{layer.stride}"
        elif isinstance(layer, Dense):
            detail = f"{layer.weight.shape[1]}->{layer.weight.shape[0]}"
        elif isinstance(layer, BatchNorm):
            detail = f"{layer.gamma.size} ch"
        rows.append((lname, layer.kind, detail, shape, n))
    c = network.config
    w = max(len(r[0]) for r in rows)
    lines = [
        f"model {c.name}: input {c.input_channels}x{c.input_size}x{c.input_size}, stacks {list(c.stacks)}, "
        f"widths {list(c.effective_widths)}",
        f"{'layer':<{w}}  {'type':<10}  {'detail':<18}  {'output':<12}  {'params':>10}",
    ]
    for name, kind, detail, shape, n in rows:
        lines.append(f"{name:<{w}}  {kind:<10}  {detail:<18}  {shape:<12}  {n:>10,}")
    lines.append(f"weighted layers: {network.weighted_layer_count()}")
    lines.append(f"parameters: {count_parameters(network):,}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_weights(network: Network, path) -> Path:
    path = Path(path)
    tensors = network.state()
    kinds = {k: "parameter" for k in network.named_parameters()} | {k: "buffer" for k in network.named_buffers()}
    meta = {"model_config": network.config.to_dict(), "dtype": network.dtype.name}
    write_tensors(path, tensors, kinds=kinds, meta=meta)
    return path


def load_weights(path, config: ModelConfig | None = None) -> Network:
    """Rebuild a network from a weight file.

    With ``config`` given, the file must match that architecture; the first
    differing tensor is named in the :class:`FormatError`.
    """
    tensors, side = read_tensors(path)
    meta = side.get("meta", {})
    if config is None:
        if "model_config" not in meta:
            raise FormatError(f"{path}: no model config recorded; pass one explicitly")
        config = ModelConfig.from_dict(meta["model_config"])
    dtype = meta.get("dtype", "float32")
    net = Network(resolve_config(config), dtype=dtype)
    expected = net.state()
    for name, arr in expected.items():
        if name not in tensors:
            raise FormatError(f"parameter mismatch: {name!r} missing from {path}")
        if tensors[name].shape != arr.shape:
            raise FormatError(
                f"parameter mismatch: {name!r} has shape {tensors[name].shape} in file, model expects {arr.shape}"
            )
    extra = [k for k in tensors if k not in expected]
    if extra:
        raise FormatError(f"parameter mismatch: unexpected tensor {extra[0]!r} in {path}")
    net.load_state({k: v.astype(net.dtype) for k, v in tensors.items()})
    net.set_mode("infer")
    return net
