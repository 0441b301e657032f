"""The dual-backbone fusion classifier.

Two backbones (one residual, one dense) see the same slice; 1x1 projection
convolutions bring both feature maps to a common width; the maps are fused by
elementwise addition, passed through ReLU, pooled globally (plain average or
generalized mean), and classified by a small affine head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .blocks import (
    BackboneSpec,
    Conv2d,
    DenseNetSpec,
    Linear,
    Module,
    ResNetSpec,
    backbone_spec_from_dict,
    build_backbone,
)
from .tensor import (
    CTF_MAGIC,
    ShapeError,
    Tensor,
    add,
    affine,
    decode_ctf,
    gem_pool,
    global_avg_pool,
    relu,
    sigmoid,
    softmax,
)

POOLING_KINDS = ("gap", "gem")
HEAD_KINDS = ("sigmoid", "softmax")

# class index convention for the softmax head: 0 = non_covid, 1 = covid
COVID_CLASS_INDEX = 1


class ConfigError(ValueError):
    """Raised for invalid model or run configuration."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or mismatches its config."""


@dataclass(frozen=True)
class ModelConfig:
    resnet: ResNetSpec = field(default_factory=ResNetSpec)
    densenet: DenseNetSpec = field(default_factory=DenseNetSpec)
    fusion_channels: int = 64
    pooling: str = "gap"
    gem_p: float = 3.0
    head: str = "sigmoid"
    input_size: tuple[int, int] = (256, 256)

    def problems(self) -> list[str]:
        """Every violated constraint, as human-readable messages."""
        errs = []
        if self.fusion_channels < 1:
            errs.append(f"model.fusion_channels must be >= 1, got {self.fusion_channels}")
        if self.pooling not in POOLING_KINDS:
            errs.append(f"model.pooling must be one of {POOLING_KINDS}, got {self.pooling!r}")
        if self.pooling == "gem" and self.gem_p <= 0:
            errs.append(f"model.gem_p must be > 0, got {self.gem_p}")
        if self.head not in HEAD_KINDS:
            errs.append(f"model.head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.resnet.downsampling != self.densenet.downsampling:
            errs.append(
                "model backbones disagree on downsampling: "
                f"resnet {self.resnet.downsampling} vs densenet {self.densenet.downsampling}")
        h, w = self.input_size
        if h < 1 or w < 1:
            errs.append(f"model.input_size must be positive, got {self.input_size}")
        else:
            d = self.resnet.downsampling
            if h % d or w % d:
                errs.append(
                    f"model.input_size {h}x{w} not divisible by the downsampling factor {d}")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError("; ".join(errs))

    def to_dict(self) -> dict:
        return {
            "resnet": self.resnet.to_dict(),
            "densenet": self.densenet.to_dict(),
            "fusion_channels": self.fusion_channels,
            "pooling": self.pooling,
            "gem_p": self.gem_p,
            "head": self.head,
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            resnet=backbone_spec_from_dict(d["resnet"]) if "resnet" in d else ResNetSpec(),
            densenet=backbone_spec_from_dict(d["densenet"]) if "densenet" in d else DenseNetSpec(),
            fusion_channels=int(d.get("fusion_channels", 64)),
            pooling=str(d.get("pooling", "gap")),
            gem_p=float(d.get("gem_p", 3.0)),
            head=str(d.get("head", "sigmoid")),
            input_size=tuple(int(v) for v in d.get("input_size", (256, 256))),
        )
        if not isinstance(cfg.resnet, ResNetSpec):
            raise ConfigError("model.resnet must have kind 'resnet'")
        if not isinstance(cfg.densenet, DenseNetSpec):
            raise ConfigError("model.densenet must have kind 'densenet'")
        return cfg


def default_mini_config(input_size: tuple[int, int] = (256, 256)) -> ModelConfig:
    """Desk-scale defaults: both mini backbones downsample by 8."""
    return ModelConfig(input_size=tuple(input_size))


class FusionProjection(Module):
    """1x1 convolutions (stride 1, with bias, no activation) that bring both
    branch outputs to the shared fusion width, followed by elementwise add."""

    def __init__(self, res_channels: int, dense_channels: int, fusion_channels: int,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.res = Conv2d(res_channels, fusion_channels, 1, rng=rng, dtype=dtype)
        self.dense = Conv2d(dense_channels, fusion_channels, 1, rng=rng, dtype=dtype)

    def forward(self, f_res: Tensor, f_dense: Tensor) -> Tensor:
        if (f_res.shape[0],) + f_res.shape[2:] != (f_dense.shape[0],) + f_dense.shape[2:]:
            raise ShapeError(
                f"fusion inputs disagree on batch/spatial dims: {f_res.shape} vs {f_dense.shape}")
        return add(self.res.forward(f_res), self.dense.forward(f_dense))


def fuse(f_res: Tensor, f_dense: Tensor, proj: FusionProjection) -> Tensor:
    return proj.forward(f_res, f_dense)


class ResDenseModel(Module):
    """Instantiated fusion network; parameter names are stable strings with
    prefixes "resnet.", "densenet.", "proj." and "head."."""

    def __init__(self, config: ModelConfig, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        config.validate()
        self.resnet = build_backbone(config.resnet, rng=rng, dtype=dtype)
        self.densenet = build_backbone(config.densenet, rng=rng, dtype=dtype)
        self.proj = FusionProjection(config.resnet.out_channels, config.densenet.out_channels,
                                     config.fusion_channels, rng=rng, dtype=dtype)
        out_dim = 1 if config.head == "sigmoid" else 2
        self.head = Linear(config.fusion_channels, out_dim, rng=rng, dtype=dtype)
        self.config = config
        self.dtype = dtype

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        """Slice probabilities: (N, 1) for the sigmoid head, (N, 2) for softmax."""
        h, w = self.config.input_size
        if x.data.ndim != 4 or x.shape[2] != h or x.shape[3] != w:
            raise ShapeError(
                f"model expects Nx3x{h}x{w} input, got shape {x.shape}")
        f_res = self.resnet.forward(x, mode)
        f_dense = self.densenet.forward(x, mode)
        fused = relu(self.proj.forward(f_res, f_dense))
        if self.config.pooling == "gem":
            pooled = gem_pool(fused, self.config.gem_p)
        else:
            pooled = global_avg_pool(fused)
        logits = affine(pooled, self.head.weight, self.head.bias)
        if self.config.head == "sigmoid":
            return sigmoid(logits)
        return softmax(logits)

    def covid_probability(self, x: Tensor, mode: str = "infer") -> np.ndarray:
        """Per-sample probability of the positive (covid) class, shape (N,)."""
        probs = self.forward(x, mode)
        if self.config.head == "sigmoid":
            return probs.data[:, 0].copy()
        return probs.data[:, COVID_CLASS_INDEX].copy()


def build_model(config: ModelConfig, seed, dtype=np.float32) -> ResDenseModel:
    """Deterministic instantiation: same (config, seed) gives bit-identical
    parameters. ``seed`` may be an int or a SeedSequence."""
    rng = np.random.default_rng(seed)
    return ResDenseModel(config, rng=rng, dtype=dtype)


def parameter_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints: "RDNC" | u32 version | u32 n_records |
#              n x (u32 name_len | name | .ctf tensor) | u32 cfg_len | config JSON

RDNC_MAGIC = b"RDNC"
RDNC_VERSION = 1


def save_checkpoint(model: ResDenseModel, path) -> None:
    records = list(model.named_parameters()) + list(model.named_buffers())
    with open(path, "wb") as fh:
        fh.write(RDNC_MAGIC)
        fh.write(struct.pack("<II", RDNC_VERSION, len(records)))
        for name, value in records:
            arr = np.ascontiguousarray(
                (value.data if isinstance(value, Tensor) else value).astype("<f4"))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(CTF_MAGIC)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)


def load_checkpoint(path, dtype=np.float32) -> ResDenseModel:
    """Rebuild the model skeleton from the embedded config and fill it with
    the stored tensors, verifying every name and shape along the way."""
    with open(path, "rb") as fh:
        blob = fh.read()
    name = str(path)
    if blob[:4] != RDNC_MAGIC:
        raise CheckpointError(f"{name}: bad magic, not an RDNC checkpoint")
    version, n_records = struct.unpack_from("<II", blob, 4)
    if version != RDNC_VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    offset = 12
    records: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(n_records):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        rec_name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        arr, offset = decode_ctf(blob, offset, name=f"{name}:{rec_name}")
        records[rec_name] = arr
        order.append(rec_name)
    (cfg_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    config = ModelConfig.from_dict(json.loads(blob[offset:offset + cfg_len].decode("utf-8")))

    model = build_model(config, seed=0, dtype=dtype)
    skeleton = {n: p for n, p in model.named_parameters()}
    skeleton.update({n: b for n, b in model.named_buffers()})
    for rec_name in order:
        if rec_name not in skeleton:
            raise CheckpointError(f"{name}: tensor {rec_name!r} not in the config-built skeleton")
        target = skeleton[rec_name]
        expected = target.shape if isinstance(target, Tensor) else target.shape
        if tuple(records[rec_name].shape) != tuple(expected):
            raise CheckpointError(
                f"{name}: tensor {rec_name!r} has shape {tuple(records[rec_name].shape)}, "
                f"config expects {tuple(expected)}")
    missing = [n for n in skeleton if n not in records]
    if missing:
        raise CheckpointError(f"{name}: tensor {missing[0]!r} missing from checkpoint")
    for rec_name, arr in records.items():
        target = skeleton[rec_name]
        if isinstance(target, Tensor):
            target.data = np.ascontiguousarray(arr.astype(dtype))
        else:
            target[:] = arr.astype(target.dtype)
    return model
