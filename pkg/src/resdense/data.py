"""Series-structured dataset handling: loading, preprocessing, augmentation,
splitting, and a synthetic generator for desk-scale runs.

A dataset on disk is ``<root>/covid/<series_id>/<slice>`` plus the same under
``non_covid/``; slices are binary PGM (P5), binary PPM (P6) or raw .ctf
tensors, ordered lexicographically by filename. Raw pixel values live in
[0, 255]; the network consumes images rescaled to [-1, 1].
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import read_ctf, write_ctf

LABEL_COVID = "covid"
LABEL_NON_COVID = "non_covid"
LABELS = (LABEL_COVID, LABEL_NON_COVID)

SLICE_EXTENSIONS = (".pgm", ".ppm", ".ctf")

RAW_RANGE = "raw"
NORMALIZED_RANGE = "normalized"


class DataError(ValueError):
    """Raised for unreadable, malformed, or inconsistent dataset inputs."""


@dataclass
class SliceImage:
    """One 2-d slice: H x W x C float pixels plus a value-range marker."""

    pixels: np.ndarray
    value_range: str = RAW_RANGE

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3:
            raise DataError(f"slice pixels must be HxWxC, got shape {self.pixels.shape}")
        self.pixels = self.pixels.astype(np.float32, copy=False)
        if self.value_range not in (RAW_RANGE, NORMALIZED_RANGE):
            raise DataError(f"unknown value_range marker {self.value_range!r}")


@dataclass(frozen=True)
class SeriesSample:
    """One CT scan: an ordered stack of slice files and its binary label.

    ``label`` may be None for series that are only being predicted.
    """

    series_id: str
    slice_paths: tuple
    label: Optional[str]

    def __post_init__(self):
        if len(self.slice_paths) < 1:
            raise DataError(f"series {self.series_id!r} has no slices")
        if self.label is not None and self.label not in LABELS:
            raise DataError(f"series {self.series_id!r} has unknown label {self.label!r}")


@dataclass
class DatasetSplit:
    train: list
    val: list


# ---------------------------------------------------------------------------
# image files


def _read_pnm_header(fh, path, magic_expected):
    magic = fh.read(2)
    if magic != magic_expected:
        raise DataError(f"{path}: expected {magic_expected.decode()} file, got magic {magic!r}")
    fields = []
    while len(fields) < 3:
        token = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            token += ch
            ch = fh.read(1)
        if not token:
            raise DataError(f"{path}: truncated header")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    return width, height


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) -> (H, W) uint8 array."""
    with open(path, "rb") as fh:
        width, height = _read_pnm_header(fh, path, b"P5")
        data = fh.read(width * height)
    if len(data) != width * height:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise DataError(f"write_pgm expects (H, W), got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) -> (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        width, height = _read_pnm_header(fh, path, b"P6")
        data = fh.read(width * height * 3)
    if len(data) != width * height * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"write_ppm expects (H, W, 3), got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_slice(path) -> SliceImage:
    """Load one slice file (raw [0, 255] values) by extension."""
    path = Path(path)
    try:
        if path.suffix == ".pgm":
            return SliceImage(read_pgm(path).astype(np.float32))
        if path.suffix == ".ppm":
            return SliceImage(read_ppm(path).astype(np.float32))
        if path.suffix == ".ctf":
            arr = read_ctf(path)
            if arr.ndim not in (2, 3):
                raise DataError(f"{path}: slice tensor must be rank 2 or 3, got rank {arr.ndim}")
            return SliceImage(arr)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read slice {path}: {exc}") from exc
    raise DataError(f"cannot read slice {path}: unsupported extension {path.suffix!r}")


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img: SliceImage, target_h: int, target_w: int) -> SliceImage:
    """Bilinear resize with half-pixel centers and edge clamping.

    Grayscale inputs come out replicated to 3 channels, so downstream code
    always sees H x W x 3.
    """
    if target_h < 1 or target_w < 1:
        raise DataError(f"resize target must be positive, got {target_h}x{target_w}")
    px = img.pixels
    h, w = px.shape[:2]
    if (h, w) == (target_h, target_w):
        out = px.copy()
    else:
        sy = (np.arange(target_h, dtype=np.float64) + 0.5) * (h / target_h) - 0.5
        sx = (np.arange(target_w, dtype=np.float64) + 0.5) * (w / target_w) - 0.5
        y0f = np.floor(sy)
        x0f = np.floor(sx)
        ty = (sy - y0f).astype(np.float32)[:, None, None]
        tx = (sx - x0f).astype(np.float32)[None, :, None]
        y0 = np.clip(y0f, 0, h - 1).astype(np.intp)
        y1 = np.clip(y0f + 1, 0, h - 1).astype(np.intp)
        x0 = np.clip(x0f, 0, w - 1).astype(np.intp)
        x1 = np.clip(x0f + 1, 0, w - 1).astype(np.intp)
        rows0 = px[y0]
        rows1 = px[y1]
        top = rows0[:, x0] * (1 - tx) + rows0[:, x1] * tx
        bottom = rows1[:, x0] * (1 - tx) + rows1[:, x1] * tx
        out = top * (1 - ty) + bottom * ty
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    return SliceImage(out.astype(np.float32), value_range=img.value_range)


def rescale_to_unit_range(img: SliceImage) -> SliceImage:
    """Map raw [0, 255] pixels to [-1, 1] via v / 127.5 - 1."""
    if img.value_range == NORMALIZED_RANGE:
        raise DataError("image is already normalized; refusing to rescale twice")
    lo, hi = float(img.pixels.min()), float(img.pixels.max())
    if lo < 0 or hi > 255:
        raise DataError(f"raw image values outside [0, 255]: range [{lo}, {hi}]")
    return SliceImage(img.pixels / np.float32(127.5) - np.float32(1.0),
                      value_range=NORMALIZED_RANGE)


def preprocess_slice(img: SliceImage, input_size: tuple[int, int]) -> np.ndarray:
    """Resize, rescale, and lay out as (3, H, W) ready for the network."""
    resized = resize_bilinear(img, input_size[0], input_size[1])
    normalized = rescale_to_unit_range(resized)
    return np.ascontiguousarray(normalized.pixels.transpose(2, 0, 1))


def load_slice_array(path, input_size: tuple[int, int]) -> np.ndarray:
    return preprocess_slice(read_slice(path), input_size)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_horizontal: bool = True
    flip_vertical: bool = False
    rotation_fraction: float = 0.2   # of a full turn, so 0.2 means +-72 degrees
    fill: float = -1.0


def hflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[:, ::-1])


def vflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[::-1])


def rotate_image(pixels: np.ndarray, angle: float, fill: float = -1.0) -> np.ndarray:
    """Rotate H x W x C pixels by ``angle`` radians about the image center,
    bilinear resampling, out-of-bounds samples filled with ``fill``."""
    if angle == 0.0:
        return pixels.copy()
    h, w = pixels.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - cx
    dy = yy - cy
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    src_x = cos_a * dx + sin_a * dy + cx
    src_y = -sin_a * dx + cos_a * dy + cy

    x0f = np.floor(src_x)
    y0f = np.floor(src_y)
    tx = (src_x - x0f).astype(np.float32)[:, :, None]
    ty = (src_y - y0f).astype(np.float32)[:, :, None]

    def tap(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = pixels[np.clip(yi, 0, h - 1).astype(np.intp),
                      np.clip(xi, 0, w - 1).astype(np.intp)]
        return np.where(valid[:, :, None], vals, np.float32(fill))

    p00 = tap(y0f, x0f)
    p01 = tap(y0f, x0f + 1)
    p10 = tap(y0f + 1, x0f)
    p11 = tap(y0f + 1, x0f + 1)
    out = (1 - ty) * ((1 - tx) * p00 + tx * p01) + ty * ((1 - tx) * p10 + tx * p11)
    return out.astype(np.float32)


def augment(img: SliceImage, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> SliceImage:
    """Random flip then random rotation within +-rotation_fraction of a turn.

    Expects a normalized image; the rotation fill is the normalized
    background value, so outputs stay inside [-1, 1]. Shape is unchanged.
    """
    if img.value_range != NORMALIZED_RANGE:
        raise DataError("augment expects a normalized image")
    px = img.pixels
    if config.flip_horizontal and rng.random() < 0.5:
        px = hflip(px)
    if config.flip_vertical and rng.random() < 0.5:
        px = vflip(px)
    angle = rng.uniform(-1.0, 1.0) * config.rotation_fraction * 2.0 * math.pi
    px = rotate_image(px, angle, fill=config.fill)
    return SliceImage(px, value_range=NORMALIZED_RANGE)


# ---------------------------------------------------------------------------
# dataset walking and splitting


def load_dataset(root_dir) -> list[SeriesSample]:
    """One SeriesSample per series folder under covid/ and non_covid/.

    Slice order within a series is lexicographic filename order. Series ids
    are ``<label>/<folder>`` so they stay unique across the two classes.
    """
    root = Path(root_dir)
    samples: list[SeriesSample] = []
    found_class_dir = False
    for label in LABELS:
        class_dir = root / label
        if not class_dir.is_dir():
            continue
        found_class_dir = True
        for series_dir in sorted(p for p in class_dir.iterdir() if p.is_dir()):
            slices = tuple(sorted(
                p for p in series_dir.iterdir()
                if p.is_file() and p.suffix in SLICE_EXTENSIONS))
            if not slices:
                raise DataError(f"series folder {series_dir} contains no readable slices")
            samples.append(SeriesSample(
                series_id=f"{label}/{series_dir.name}",
                slice_paths=slices,
                label=label,
            ))
    if not found_class_dir:
        warnings.warn(f"{root}: no covid/ or non_covid/ directories found; empty dataset")
    return samples


def split_train_val(samples: Sequence[SeriesSample], ratio: float, seed) -> DatasetSplit:
    """Seeded shuffle then prefix split at round(ratio * n), series-granular."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    if len(samples) < 2:
        raise DataError(f"need at least 2 series to split, got {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(ratio * len(samples) + 0.5)
    shuffled = [samples[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train], val=shuffled[n_train:])


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic_dataset(out_dir, n_series: int, slices_per_series: int,
                               image_size: int, class_signal: float, seed: int) -> dict:
    """Write a desk-scale synthetic dataset in the load_dataset layout.

    Covid series carry a bright Gaussian blob near the image center on every
    slice; non-covid series are background noise only. Deterministic from the
    seed, down to the bytes. Returns the manifest dict.
    """
    if not 0.0 < class_signal <= 1.0:
        raise DataError(f"class_signal must be in (0, 1], got {class_signal}")
    if n_series < 2 or slices_per_series < 1 or image_size < 8:
        raise DataError("need n_series >= 2, slices_per_series >= 1, image_size >= 8")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise DataError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_covid = n_series - n_series // 2
    sigma = image_size / 8.0
    amplitude = 110.0 * class_signal
    center = (image_size - 1) / 2.0
    jitter = image_size / 16.0
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")

    for idx in range(n_series):
        label = LABEL_COVID if idx < n_covid else LABEL_NON_COVID
        series_dir = out / label / f"s{idx:04d}"
        series_dir.mkdir(parents=True)
        for s in range(slices_per_series):
            img = rng.uniform(70.0, 130.0, (image_size, image_size))
            if label == LABEL_COVID:
                cy = center + rng.uniform(-jitter, jitter)
                cx = center + rng.uniform(-jitter, jitter)
                r2 = (yy - cy) ** 2 + (xx - cx) ** 2
                img = img + amplitude * np.exp(-r2 / (2.0 * sigma ** 2))
            write_pgm(series_dir / f"slice_{s:02d}.pgm",
                      np.clip(np.rint(img), 0, 255).astype(np.uint8))

    manifest = {
        "generator": "resdense-synthetic-v1",
        "n_series": n_series,
        "n_covid": n_covid,
        "n_non_covid": n_series - n_covid,
        "slices_per_series": slices_per_series,
        "image_size": image_size,
        "class_signal": class_signal,
        "seed": seed,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest
