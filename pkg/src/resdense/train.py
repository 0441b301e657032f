"""Losses, optimizers, the two-stage freeze schedule, and the training loop.

Fine-tuning runs in two stages: stage 1 freezes every backbone parameter and
trains only the projections and the head; stage 2 additionally unfreezes the
trailing fraction of each backbone's parameters in forward order. The best
epoch by validation macro-F1 (ties broken by lower validation loss) is
checkpointed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (
    AugmentConfig,
    LABEL_COVID,
    NORMALIZED_RANGE,
    DatasetSplit,
    SliceImage,
    augment,
    read_slice,
    rescale_to_unit_range,
    resize_bilinear,
)
from .metrics import record_from_probs, report_from_records
from .model import ConfigError, ResDenseModel, save_checkpoint
from .rng import substream
from .tensor import Tape, Tensor, backward, record_op

CLIP_EPS = 1e-7

OPTIMIZERS = ("rmsprop", "adam")
LOSSES = ("binary_ce", "categorical_ce")


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the epoch and batch."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    learning_rate: float = 1e-4
    optimizer: str = "rmsprop"
    loss: str = "binary_ce"
    stage1_fraction: float = 0.25
    stage2_unfreeze_fraction: float = 0.5
    seed: int = 0

    def problems(self) -> list[str]:
        errs = []
        if self.batch_size < 1:
            errs.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            errs.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            errs.append(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            errs.append(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in LOSSES:
            errs.append(f"train.loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            errs.append(f"train.stage1_fraction must be in [0, 1], got {self.stage1_fraction}")
        if not 0.0 <= self.stage2_unfreeze_fraction <= 1.0:
            errs.append(
                f"train.stage2_unfreeze_fraction must be in [0, 1], got {self.stage2_unfreeze_fraction}")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError("; ".join(errs))


# ---------------------------------------------------------------------------
# losses (fused ops: probabilities in, batch-mean scalar out)


def binary_cross_entropy(probs: Tensor, labels) -> Tensor:
    """-[y log p + (1-y) log(1-p)], probabilities clipped to [1e-7, 1-1e-7],
    averaged over the batch. ``labels`` holds 0/1 per sample."""
    y = np.asarray(labels, dtype=probs.dtype).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"binary labels must be 0 or 1, got {sorted(set(y.tolist()))}")
    raw = probs.data.reshape(-1)
    if raw.shape != y.shape:
        raise ValueError(f"got {raw.shape[0]} probabilities for {y.shape[0]} labels")
    p = np.clip(raw, CLIP_EPS, 1.0 - CLIP_EPS)
    n = p.shape[0]
    value = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()

    def bwd(g):
        interior = (raw > CLIP_EPS) & (raw < 1.0 - CLIP_EPS)
        grad = np.where(interior, (p - y) / (p * (1 - p)), 0.0) / n
        return ((g * grad).reshape(probs.shape).astype(probs.dtype),)

    return record_op("binary_ce", (probs,), np.asarray(value, dtype=probs.dtype), bwd)


def categorical_cross_entropy(probs: Tensor, labels) -> Tensor:
    """-log p[label] with the same clipping, batch-averaged. ``probs`` rows
    must lie on the simplex; ``labels`` holds class indices."""
    if probs.data.ndim != 2:
        raise ValueError(f"categorical probabilities must be (N, K), got {probs.shape}")
    n, k = probs.shape
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    if idx.shape[0] != n:
        raise ValueError(f"got {n} probability rows for {idx.shape[0]} labels")
    if np.any((idx < 0) | (idx >= k)):
        raise ValueError(f"label index out of range for {k} classes: {idx}")
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    raw = probs.data[np.arange(n), idx]
    p = np.clip(raw, CLIP_EPS, 1.0 - CLIP_EPS)
    value = -np.log(p).mean()

    def bwd(g):
        grad = np.zeros_like(probs.data)
        interior = (raw > CLIP_EPS) & (raw < 1.0 - CLIP_EPS)
        grad[np.arange(n), idx] = np.where(interior, -1.0 / p, 0.0) / n
        return ((g * grad).astype(probs.dtype),)

    return record_op("categorical_ce", (probs,), np.asarray(value, dtype=probs.dtype), bwd)


# ---------------------------------------------------------------------------
# freezing


@dataclass(frozen=True)
class FreezeMask:
    """Parameter names excluded from optimizer updates."""

    names: frozenset

    def __contains__(self, name: str) -> bool:
        return name in self.names

    @classmethod
    def of(cls, model, names) -> "FreezeMask":
        known = {n for n, _ in model.named_parameters()}
        unknown = sorted(set(names) - known)
        if unknown:
            raise ValueError(f"freeze mask names not in model: {unknown}")
        return cls(frozenset(names))


BACKBONE_PREFIXES = ("resnet.", "densenet.")


def make_freeze_mask(model, stage: int, config: TrainConfig) -> FreezeMask:
    """Stage 1 freezes both backbones entirely; stage 2 unfreezes the trailing
    stage2_unfreeze_fraction of each backbone's parameters in forward order."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    ordered = [name for name, _ in model.named_parameters()]
    frozen: list[str] = []
    for prefix in BACKBONE_PREFIXES:
        names = [n for n in ordered if n.startswith(prefix)]
        if stage == 1:
            frozen.extend(names)
        else:
            unfrozen = int(round(config.stage2_unfreeze_fraction * len(names)))
            frozen.extend(names[:len(names) - unfrozen])
    return FreezeMask.of(model, frozen)


# ---------------------------------------------------------------------------
# optimizers


class RMSprop:
    """acc <- rho * acc + (1 - rho) * g^2 ;  w <- w - lr * g / sqrt(acc + eps)"""

    def __init__(self, named_params: dict, lr: float, rho: float = 0.9, eps: float = 1e-7):
        self.params = dict(named_params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.acc = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, mask: Optional[FreezeMask] = None) -> None:
        for name, p in self.params.items():
            if mask is not None and name in mask:
                continue
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad
            acc = self.acc[name]
            acc *= self.rho
            acc += (1.0 - self.rho) * g * g
            p.data -= (self.lr * g / np.sqrt(acc + self.eps)).astype(p.dtype)


class Adam:
    """Bias-corrected first/second moment update; step counts are kept per
    parameter so frozen parameters' state is untouched."""

    def __init__(self, named_params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.t = {name: 0 for name in self.params}

    def step(self, mask: Optional[FreezeMask] = None) -> None:
        for name, p in self.params.items():
            if mask is not None and name in mask:
                continue
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def build_optimizer(model, config: TrainConfig):
    named = dict(model.named_parameters())
    if config.optimizer == "rmsprop":
        return RMSprop(named, lr=config.learning_rate)
    if config.optimizer == "adam":
        return Adam(named, lr=config.learning_rate)
    raise ConfigError(f"unknown optimizer {config.optimizer!r}")


# ---------------------------------------------------------------------------
# the training loop


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_macro_f1: float


@dataclass
class FitResult:
    model: ResDenseModel
    history: list
    best_epoch: int
    checkpoint_path: Optional[Path]


def _loss_fn(config: TrainConfig):
    if config.loss == "binary_ce":
        return binary_cross_entropy
    return categorical_cross_entropy


def _check_head_loss_pair(model: ResDenseModel, config: TrainConfig) -> None:
    if config.loss == "binary_ce" and model.config.head != "sigmoid":
        raise ConfigError("train.loss binary_ce requires model.head 'sigmoid'")
    if config.loss == "categorical_ce" and model.config.head != "softmax":
        raise ConfigError("train.loss categorical_ce requires model.head 'softmax'")


def _load_normalized(path, input_size) -> np.ndarray:
    """Slice file -> normalized H x W x 3 pixels (kept HWC for augmentation)."""
    img = rescale_to_unit_range(resize_bilinear(read_slice(path), *input_size))
    return img.pixels


def fit(model: ResDenseModel, split: DatasetSplit, config: TrainConfig,
        augment_config: Optional[AugmentConfig] = AugmentConfig(),
        out_dir=None, checkpoint_name: str = "checkpoint.rdnc") -> FitResult:
    """Train per-slice with the staged freeze schedule and keep the best epoch.

    Per epoch: seeded shuffle of the training slices, optional augmentation,
    forward in train mode, loss, backward, optimizer step under the current
    stage's mask; then a full validation pass (infer mode, no augmentation)
    recording loss, series accuracy and series macro-F1.
    """
    config.validate()
    _check_head_loss_pair(model, config)
    if not split.train or not split.val:
        raise ConfigError(
            f"both splits must be non-empty, got {len(split.train)} train / {len(split.val)} val")

    input_size = model.config.input_size
    label_value = {LABEL_COVID: 1}

    train_imgs: list[np.ndarray] = []
    train_y: list[int] = []
    for sample in split.train:
        y = label_value.get(sample.label, 0)
        for path in sample.slice_paths:
            train_imgs.append(_load_normalized(path, input_size))
            train_y.append(y)
    train_y_arr = np.asarray(train_y)

    val_series = []
    for sample in split.val:
        arrays = np.stack([
            _load_normalized(path, input_size).transpose(2, 0, 1)
            for path in sample.slice_paths
        ]).astype(model.dtype)
        val_series.append((sample.series_id, arrays, sample.label,
                           label_value.get(sample.label, 0)))

    shuffle_rng = substream(config.seed, "shuffle")
    augment_rng = substream(config.seed, "augment")
    optimizer = build_optimizer(model, config)
    loss_fn = _loss_fn(config)
    stage1_epochs = int(round(config.stage1_fraction * config.epochs))

    checkpoint_path = Path(out_dir) / checkpoint_name if out_dir is not None else None
    history: list[EpochStats] = []
    best_key = None
    best_epoch = -1
    n_train = len(train_imgs)
    mask = None
    current_stage = 0

    for epoch in range(1, config.epochs + 1):
        stage = 1 if epoch <= stage1_epochs else 2
        if stage != current_stage:
            mask = make_freeze_mask(model, stage, config)
            current_stage = stage

        perm = shuffle_rng.permutation(n_train)
        total_loss = 0.0
        for batch_idx, start in enumerate(range(0, n_train, config.batch_size)):
            chunk = perm[start:start + config.batch_size]
            batch = np.empty((len(chunk), 3, input_size[0], input_size[1]), dtype=model.dtype)
            for j, i in enumerate(chunk):
                px = train_imgs[i]
                if augment_config is not None:
                    px = augment(SliceImage(px, NORMALIZED_RANGE), augment_rng,
                                 augment_config).pixels
                batch[j] = px.transpose(2, 0, 1)
            x = Tensor(batch)
            y = train_y_arr[chunk]
            with Tape() as tape:
                probs = model.forward(x, mode="train")
                loss = loss_fn(probs, y)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, batch_idx, value)
                model.zero_grad()
                backward(tape, loss)
            optimizer.step(mask)
            total_loss += value * len(chunk)
        train_loss = total_loss / n_train

        records = []
        val_loss_sum = 0.0
        val_slices = 0
        for series_id, arrays, label, y in val_series:
            x = Tensor(arrays)
            probs = model.forward(x, mode="infer")
            covid_p = probs.data[:, 0] if model.config.head == "sigmoid" else probs.data[:, 1]
            val_loss_sum += loss_fn(probs, np.full(arrays.shape[0], y)).item() * arrays.shape[0]
            val_slices += arrays.shape[0]
            records.append(record_from_probs(series_id, covid_p.tolist(), true_label=label))
        report = report_from_records(records)
        val_loss = val_loss_sum / val_slices

        stats = EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                           val_acc=report.accuracy, val_macro_f1=report.macro_f1)
        history.append(stats)

        key = (report.macro_f1, -val_loss)
        if best_key is None or key > best_key:
            best_key = key
            best_epoch = epoch
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)

    return FitResult(model=model, history=history, best_epoch=best_epoch,
                     checkpoint_path=checkpoint_path)


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "val_macro_f1")


def write_history_csv(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for s in history:
            writer.writerow([s.epoch, f"{s.train_loss:.6f}", f"{s.val_loss:.6f}",
                             f"{s.val_acc:.6f}", f"{s.val_macro_f1:.6f}"])
