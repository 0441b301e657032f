"""Miniature residual and densely-connected backbones.

Both kinds share the same stem (3x3 stride-2 conv, batch norm, ReLU, 2x2
average pool), so a stem contributes a downsampling factor of 4. Residual
stages add a factor of 2 per strided stage entry; dense transitions add a
factor of 2 each. Desk-scale defaults live in :mod:`resdense.model`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    avg_pool2d,
    batch_norm2d,
    concat_channels,
    conv2d,
    relu,
)

STEM_DOWNSAMPLING = 4


class Module:
    """Tiny parameter container: tracks child modules, Tensors and buffers.

    Attribute assignment registers Tensors as parameters and Modules as
    children, in insertion order, which matches forward order everywhere in
    this package (freeze masks rely on that).
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
            self._children.pop(name, None)
        elif isinstance(value, Module):
            self._children[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


# ---------------------------------------------------------------------------
# layers


class Conv2d(Module):
    """Convolution layer with He-uniform weight init and optional bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        bound = math.sqrt(6.0 / fan_in)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(rng.uniform(-bound, bound, shape).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = RunningStats.initial(channels, dtype=dtype)
        self.register_buffer("running_mean", self.stats.mean)
        self.register_buffer("running_var", self.stats.var)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self.stats, mode=mode)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        bound = math.sqrt(6.0 / in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_features, out_features)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    bottleneck: bool = False

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"residual block stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("residual block channel counts must be positive")

    @property
    def projection_shortcut(self) -> bool:
        # required exactly when the identity shortcut cannot match shapes
        return self.in_channels != self.out_channels or self.stride != 1


@dataclass(frozen=True)
class DenseBlockSpec:
    num_layers: int
    growth_rate: int
    in_channels: int

    def __post_init__(self):
        if min(self.num_layers, self.growth_rate, self.in_channels) < 1:
            raise ValueError("dense block spec fields must be positive")

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.num_layers * self.growth_rate

    def layer_in_channels(self, i: int) -> int:
        """Channels consumed by layer ``i`` (1-indexed)."""
        return self.in_channels + (i - 1) * self.growth_rate


@dataclass(frozen=True)
class ResidualStage:
    blocks: int
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class ResNetSpec:
    stem_channels: int = 16
    stages: tuple[ResidualStage, ...] = (ResidualStage(2, 16, 1), ResidualStage(2, 32, 2))
    bottleneck: bool = False

    kind = "resnet"

    @property
    def out_channels(self) -> int:
        return self.stages[-1].channels

    @property
    def downsampling(self) -> int:
        d = STEM_DOWNSAMPLING
        for stage in self.stages:
            d *= stage.stride
        return d

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "stem_channels": self.stem_channels,
            "stages": [{"blocks": s.blocks, "channels": s.channels, "stride": s.stride}
                       for s in self.stages],
            "bottleneck": self.bottleneck,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResNetSpec":
        return cls(
            stem_channels=int(d["stem_channels"]),
            stages=tuple(ResidualStage(int(s["blocks"]), int(s["channels"]), int(s.get("stride", 1)))
                         for s in d["stages"]),
            bottleneck=bool(d.get("bottleneck", False)),
        )


@dataclass(frozen=True)
class DenseNetSpec:
    stem_channels: int = 16
    block_layers: tuple[int, ...] = (4, 4)
    growth_rate: int = 8
    compression: float = 0.5

    kind = "densenet"

    @property
    def out_channels(self) -> int:
        ch = self.stem_channels
        for i, layers in enumerate(self.block_layers):
            ch += layers * self.growth_rate
            if i < len(self.block_layers) - 1:
                ch = int(ch * self.compression)
        return ch

    @property
    def downsampling(self) -> int:
        return STEM_DOWNSAMPLING * 2 ** (len(self.block_layers) - 1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "stem_channels": self.stem_channels,
            "block_layers": list(self.block_layers),
            "growth_rate": self.growth_rate,
            "compression": self.compression,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNetSpec":
        return cls(
            stem_channels=int(d["stem_channels"]),
            block_layers=tuple(int(v) for v in d["block_layers"]),
            growth_rate=int(d["growth_rate"]),
            compression=float(d.get("compression", 0.5)),
        )


BackboneSpec = Union[ResNetSpec, DenseNetSpec]


def backbone_spec_from_dict(d: dict) -> BackboneSpec:
    kind = d.get("kind")
    if kind == "resnet":
        return ResNetSpec.from_dict(d)
    if kind == "densenet":
        return DenseNetSpec.from_dict(d)
    raise ValueError(f"unknown backbone kind: {kind!r}")


# ---------------------------------------------------------------------------
# blocks


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN plus a shortcut, ReLU after the merge.

    The shortcut is the identity when shapes already match, otherwise a
    strided 1x1 projection with its own batch norm. The bottleneck variant
    squeezes through out_channels // 4 before expanding back.
    """

    def __init__(self, spec: ResidualBlockSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        cin, cout, s = spec.in_channels, spec.out_channels, spec.stride
        if spec.bottleneck:
            mid = max(cout // 4, 1)
            self.conv1 = Conv2d(cin, mid, 1, bias=False, rng=rng, dtype=dtype)
            self.bn1 = BatchNorm2d(mid, dtype=dtype)
            self.conv2 = Conv2d(mid, mid, 3, stride=s, padding=1, bias=False, rng=rng, dtype=dtype)
            self.bn2 = BatchNorm2d(mid, dtype=dtype)
            self.conv3 = Conv2d(mid, cout, 1, bias=False, rng=rng, dtype=dtype)
            self.bn3 = BatchNorm2d(cout, dtype=dtype)
        else:
            self.conv1 = Conv2d(cin, cout, 3, stride=s, padding=1, bias=False, rng=rng, dtype=dtype)
            self.bn1 = BatchNorm2d(cout, dtype=dtype)
            self.conv2 = Conv2d(cout, cout, 3, padding=1, bias=False, rng=rng, dtype=dtype)
            self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if spec.projection_shortcut:
            self.proj_conv = Conv2d(cin, cout, 1, stride=s, bias=False, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"residual block expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        h = relu(self.bn1.forward(self.conv1.forward(x), mode))
        if self.spec.bottleneck:
            h = relu(self.bn2.forward(self.conv2.forward(h), mode))
            h = self.bn3.forward(self.conv3.forward(h), mode)
        else:
            h = self.bn2.forward(self.conv2.forward(h), mode)
        if self.spec.projection_shortcut:
            shortcut = self.proj_bn.forward(self.proj_conv.forward(x), mode)
        else:
            shortcut = x
        return relu(add(h, shortcut))


class DenseLayer(Module):
    """BN -> ReLU -> 3x3 conv producing ``growth_rate`` new channels."""

    def __init__(self, in_channels: int, growth_rate: int,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.bn = BatchNorm2d(in_channels, dtype=dtype)
        self.conv = Conv2d(in_channels, growth_rate, 3, padding=1, bias=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return self.conv.forward(relu(self.bn.forward(x, mode)))


class DenseBlock(Module):
    """Each layer consumes the concatenation of the block input and every
    earlier layer's output; the block emits all of them concatenated.

    ``last_layer_fanin`` records, per layer of the most recent forward, how
    many source feature maps it consumed and at what channel width, so tests
    can inspect the connectivity of the executed graph.
    """

    def __init__(self, spec: DenseBlockSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.layers = ModuleList([
            DenseLayer(spec.layer_in_channels(i), spec.growth_rate, rng=rng, dtype=dtype)
            for i in range(1, spec.num_layers + 1)
        ])
        self.last_layer_fanin: list[tuple[int, int]] = []

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"dense block expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        feats = [x]
        fanin = []
        for layer in self.layers:
            inp = concat_channels(feats)
            fanin.append((len(feats), inp.shape[1]))
            feats.append(layer.forward(inp, mode))
        self.last_layer_fanin = fanin
        return concat_channels(feats)

    def connection_count(self) -> int:
        """Direct connections consumed by the layers of the last forward."""
        return sum(n for n, _ in self.last_layer_fanin)


class Transition(Module):
    """1x1 conv to the target width, then 2x2 stride-2 average pooling."""

    def __init__(self, in_channels: int, out_channels: int,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return avg_pool2d(self.conv.forward(x), kernel=2, stride=2)


class Stem(Module):
    def __init__(self, in_channels: int, out_channels: int,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False,
                           rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return avg_pool2d(relu(self.bn.forward(self.conv.forward(x), mode)))


# ---------------------------------------------------------------------------
# backbones


class ResNetBackbone(Module):
    def __init__(self, spec: ResNetSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.stem = Stem(3, spec.stem_channels, rng=rng, dtype=dtype)
        stages = []
        in_ch = spec.stem_channels
        for stage in spec.stages:
            blocks = []
            for b in range(stage.blocks):
                block_spec = ResidualBlockSpec(
                    in_channels=in_ch if b == 0 else stage.channels,
                    out_channels=stage.channels,
                    stride=stage.stride if b == 0 else 1,
                    bottleneck=spec.bottleneck,
                )
                blocks.append(ResidualBlock(block_spec, rng=rng, dtype=dtype))
            stages.append(ModuleList(blocks))
            in_ch = stage.channels
        self.stages = ModuleList(stages)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    @property
    def downsampling(self) -> int:
        return self.spec.downsampling

    def forward(self, x: Tensor, mode: str) -> Tensor:
        h = self.stem.forward(x, mode)
        for stage in self.stages:
            for block in stage:
                h = block.forward(h, mode)
        return h


class DenseNetBackbone(Module):
    def __init__(self, spec: DenseNetSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.stem = Stem(3, spec.stem_channels, rng=rng, dtype=dtype)
        features = []
        ch = spec.stem_channels
        for i, layers in enumerate(spec.block_layers):
            block_spec = DenseBlockSpec(num_layers=layers, growth_rate=spec.growth_rate,
                                        in_channels=ch)
            features.append(DenseBlock(block_spec, rng=rng, dtype=dtype))
            ch = block_spec.out_channels
            if i < len(spec.block_layers) - 1:
                out_ch = int(ch * spec.compression)
                features.append(Transition(ch, out_ch, rng=rng, dtype=dtype))
                ch = out_ch
        self.features = ModuleList(features)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    @property
    def downsampling(self) -> int:
        return self.spec.downsampling

    def forward(self, x: Tensor, mode: str) -> Tensor:
        h = self.stem.forward(x, mode)
        for feature in self.features:
            if isinstance(feature, DenseBlock):
                h = feature.forward(h, mode)
            else:
                h = feature.forward(h)
        return h


def build_backbone(spec: BackboneSpec, *, rng: np.random.Generator, dtype=np.float32):
    if isinstance(spec, ResNetSpec):
        return ResNetBackbone(spec, rng=rng, dtype=dtype)
    if isinstance(spec, DenseNetSpec):
        return DenseNetBackbone(spec, rng=rng, dtype=dtype)
    raise TypeError(f"unsupported backbone spec: {type(spec).__name__}")
