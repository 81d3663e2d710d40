"""
Datasets: the two-moons toy problem, synthetic bar images and the raw_u8 image format.

raw_u8 layout (all integers little-endian u32):
    offset  0  magic   b"GNDS"
    offset  4  version 1
    offset  8  N, C, W, H
    offset 24  N*C*H*W pixel bytes, image-major then channel, row, column
               N label bytes
               CRC32 of every preceding byte
"""
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from sklearn.datasets import make_moons

from models.kernels import SpatialShape
from util.errors import ChecksumMismatch, FormatError, ShapeMismatch

logger = logging.getLogger(__name__)

MAGIC = b"GNDS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIII")
CRC = struct.Struct("<I")
STD_FLOOR = 1e-8


@dataclass
class Dataset:
    inputs: np.ndarray        # [P, C, H, W], float64
    labels: np.ndarray        # [P], int64
    num_classes: int
    split: str = "train"
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise ShapeMismatch(f"inputs must be [P, C, H, W], got {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeMismatch(f"{self.inputs.shape[0]} inputs for {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def channels(self) -> int:
        return self.inputs.shape[1]

    @property
    def shape(self) -> SpatialShape:
        return SpatialShape(len(self), self.inputs.shape[2], self.inputs.shape[3])

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.inputs[:count], self.labels[:count], self.num_classes, self.split,
                       self.norm_mean, self.norm_std)

    def tensors(self, dtype: torch.dtype, device: str = "cpu") -> Tuple[torch.Tensor, torch.Tensor]:
        return (torch.as_tensor(self.inputs, dtype=dtype, device=device),
                torch.as_tensor(self.labels, dtype=torch.long, device=device))


def gen_toy_binary(n: int, seed: int, noise: float = 0.1, split: str = "train") -> Dataset:
    """Two interleaved moons in 2-D with Gaussian noise; n // 2 points in the first class."""
    if n < 4:
        raise ValueError(f"The toy problem needs at least 4 points, got {n}")
    x, y = make_moons(n_samples=n, noise=noise, random_state=seed, shuffle=True)
    inputs = x.astype(np.float64).reshape(n, 2, 1, 1)
    return Dataset(inputs, y.astype(np.int64), num_classes=2, split=split)


def write_toy_csv(dataset: Dataset, path: str) -> None:
    table = np.column_stack([dataset.inputs.reshape(len(dataset), -1), dataset.labels])
    header = ",".join([f"x{i}" for i in range(table.shape[1] - 1)] + ["label"])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


def gen_synthetic_images(n: int, classes: int, size: int, channels: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Oriented-bar images: class c draws a bar at angle c·π/classes through a jittered centre,
    on a noisy background with a random per-image tint. Returns (uint8 [n, C, size, size], labels).
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    coords = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    for idx, label in enumerate(labels):
        angle = np.pi * label / classes + rng.normal(0.0, 0.05)
        cy, cx = rng.uniform(-size / 8, size / 8, size=2)
        dist = np.abs(-(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle))
        bar = np.clip(1.5 - dist, 0.0, 1.0)
        tint = rng.uniform(0.5, 1.0, size=channels)
        img = 0.15 + 0.7 * bar[None] * tint[:, None, None] + rng.normal(0.0, 0.05, size=(channels, size, size))
        images[idx] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def write_image_dataset(path: str, pixels: np.ndarray, labels: np.ndarray) -> None:
    if pixels.dtype != np.uint8 or pixels.ndim != 4:
        raise ShapeMismatch(f"pixels must be uint8 [N, C, H, W], got {pixels.dtype} {pixels.shape}")
    if labels.shape[0] != pixels.shape[0] or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must be one byte per image")
    n, c, h, w = pixels.shape
    payload = HEADER.pack(MAGIC, FORMAT_VERSION, n, c, w, h) + pixels.tobytes(order="C") \
        + labels.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(payload + CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))


def read_image_file(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Parse a raw_u8 file into (uint8 pixels [N, C, H, W], int64 labels)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER.size:
        raise FormatError("File shorter than the header", offset=len(data))
    magic, version, n, c, w, h = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported version {version}", offset=4)
    if min(c, w, h) == 0:
        raise FormatError("Zero channel or spatial dimension", offset=12)

    pixel_end = HEADER.size + n * c * w * h
    label_end = pixel_end + n
    total = label_end + CRC.size
    if len(data) < total:
        raise FormatError(f"Truncated payload: expected {total} bytes, found {len(data)}", offset=len(data))
    if len(data) > total:
        raise FormatError(f"{len(data) - total} trailing bytes after the checksum", offset=total)

    (stored,) = CRC.unpack_from(data, label_end)
    computed = zlib.crc32(data[:label_end]) & 0xFFFFFFFF
    if stored != computed:
        raise ChecksumMismatch(f"CRC32 {stored:#010x} does not match computed {computed:#010x}", offset=label_end)

    pixels = np.frombuffer(data, dtype=np.uint8, count=n * c * w * h, offset=HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pixel_end).astype(np.int64)
    return pixels.copy(), labels


def channel_stats(scaled: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = scaled.mean(axis=(0, 2, 3))
    std = np.maximum(scaled.std(axis=(0, 2, 3)), STD_FLOOR)
    return mean, std


def load_image_dataset(path: str, kind: str = "raw_u8", split: str = "train",
                       stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                       num_classes: Optional[int] = None) -> Dataset:
    """
    Load a raw_u8 file, scale pixels to [0, 1] and normalise each channel. ``stats`` must be
    the train split's (mean, std) when loading an eval split; without it the statistics are
    computed from this file.
    """
    if kind != "raw_u8":
        raise ValueError(f"Unsupported image dataset kind: {kind}")
    pixels, labels = read_image_file(path)
    scaled = pixels.astype(np.float64) / 255.0
    mean, std = stats if stats is not None else channel_stats(scaled)
    inputs = (scaled - mean[None, :, None, None]) / std[None, :, None, None]
    classes = num_classes if num_classes is not None else int(labels.max(initial=0)) + 1
    logger.info(f"Loaded {os.path.basename(path)} ({split}): {pixels.shape[0]} images, "
                f"{pixels.shape[1]}x{pixels.shape[2]}x{pixels.shape[3]}, channel mean {np.round(mean, 4).tolist()}")
    return Dataset(inputs, labels, classes, split, mean, std)


def datasets_from_config(config: dict) -> Tuple[Dataset, Optional[Dataset]]:
    """(train, eval) splits for a resolved config; eval is None when no eval split is configured."""
    seed = int(config["train.seed"])
    if config["data.kind"] == "toy":
        noise = float(config["data.noise"])
        train = gen_toy_binary(int(config["data.train_size"]), seed, noise, "train")
        eval_size = int(config["data.eval_size"])
        held_out = gen_toy_binary(eval_size, seed + 1, noise, "eval") if eval_size > 0 else None
        return train, held_out

    train = load_image_dataset(config["data.train_path"], "raw_u8", "train")
    held_out = None
    if config["data.eval_path"]:
        held_out = load_image_dataset(config["data.eval_path"], "raw_u8", "eval",
                                      stats=(train.norm_mean, train.norm_std), num_classes=train.num_classes)
    return train, held_out
