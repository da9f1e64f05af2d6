"""Dataset ingestion and synthetic generation.

Images are kept as raw uint8 planes (C, H, W); normalization statistics are
metadata applied when batches are materialized, so raw bytes round-trip
unchanged through save/load. Batch order per epoch is a pure function of
(seed, epoch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from blockprune.errors import ConfigError, DataError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

_RECORD_LAYOUTS = {
    "cifar10": 1,  # label bytes per record before the 3072 pixel bytes
    "cifar100": 2,  # coarse then fine label; the fine label is used
}


@dataclass(frozen=True)
class LabeledImage:
    label: int
    pixels: np.ndarray  # (3, H, W) float32, normalized


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 64
    image_size: int = 16
    seed: int = 0
    blob_separation: float = 10.0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1 or self.image_size < 1:
            raise ConfigError("synthetic spec counts must be >= 1")
        if self.blob_separation < 0:
            raise ConfigError("blob_separation must be >= 0")


class Dataset:
    """Immutable labeled image collection with normalization metadata."""

    def __init__(
        self,
        images: np.ndarray,
        labels: np.ndarray,
        num_classes: int,
        mean: tuple[float, float, float],
        std: tuple[float, float, float],
    ):
        if images.dtype != np.uint8 or images.ndim != 4 or images.shape[1] != 3:
            raise DataError("images must be uint8 with shape (n, 3, h, w)")
        if labels.shape != (images.shape[0],):
            raise DataError("labels must be one per image")
        bad = np.nonzero(labels >= num_classes)[0]
        if bad.size:
            raise DataError(f"record {bad[0]}: label {labels[bad[0]]} >= {num_classes}")
        self.images = images
        self.labels = labels.astype(np.int64)
        self.num_classes = num_classes
        self.mean = tuple(float(m) for m in mean)
        self.std = tuple(float(s) for s in std)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(int(self.labels[i]), self._normalize(self.images[i : i + 1])[0])

    def _normalize(self, raw: np.ndarray) -> np.ndarray:
        x = raw.astype(np.float32) / 255.0
        mean = np.asarray(self.mean, dtype=np.float32).reshape(1, 3, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(1, 3, 1, 1)
        return (x - mean) / std

    def tensors(
        self,
        indices: np.ndarray | None = None,
        augment: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Materialize a (normalized float32, int64 label) batch."""
        idx = np.arange(len(self)) if indices is None else indices
        raw = self.images[idx]
        if augment:
            if rng is None:
                raise ConfigError("augmentation requires an explicit rng")
            raw = _crop_and_flip(raw, rng)
        x = torch.from_numpy(self._normalize(raw))
        y = torch.from_numpy(self.labels[idx])
        return x, y


def _crop_and_flip(raw: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    n, c, h, w = raw.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=raw.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = raw
    out = np.empty_like(raw)
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, tops[i] : tops[i] + h, lefts[i] : lefts[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def load_cifar_binary(
    path,
    num_classes: int = 10,
    fmt: str = "cifar10",
    stats: str = "canonical",
) -> Dataset:
    """Parse a standard CIFAR binary batch file.

    Records are label byte(s) followed by 3072 pixel bytes in row-major
    R, G, B planes. `stats` selects the canonical per-channel constants or
    statistics computed from this file.
    """
    if fmt not in _RECORD_LAYOUTS:
        raise ConfigError(f"unknown format {fmt!r}")
    if stats not in ("canonical", "computed"):
        raise ConfigError(f"unknown stats mode {stats!r}")
    label_bytes = _RECORD_LAYOUTS[fmt]
    record = label_bytes + 3072
    blob = np.fromfile(str(path), dtype=np.uint8)
    n, rem = divmod(blob.size, record)
    if rem:
        raise DataError(
            f"{path}: truncated record at byte offset {n * record} "
            f"({rem} trailing bytes, record size {record})",
            offset=n * record,
        )
    if n == 0:
        images = np.zeros((0, 3, 32, 32), dtype=np.uint8)
        labels = np.zeros((0,), dtype=np.int64)
    else:
        rows = blob.reshape(n, record)
        labels = rows[:, label_bytes - 1].astype(np.int64)  # fine label when two are present
        images = rows[:, label_bytes:].reshape(n, 3, 32, 32)
    if stats == "canonical":
        mean, std = CIFAR10_MEAN, CIFAR10_STD
    else:
        mean, std = _computed_stats(images)
    return Dataset(images, labels, num_classes, mean, std)


def save_cifar_binary(dataset: Dataset, path) -> None:
    """Write records in the single-label-byte CIFAR layout (raw bytes preserved)."""
    if dataset.num_classes > 256:
        raise ConfigError("single label byte cannot encode more than 256 classes")
    n = len(dataset)
    rows = np.empty((n, 1 + dataset.images[0].size), dtype=np.uint8)
    rows[:, 0] = dataset.labels.astype(np.uint8)
    rows[:, 1:] = dataset.images.reshape(n, -1)
    rows.tofile(str(path))


def _computed_stats(images: np.ndarray) -> tuple[tuple, tuple]:
    if images.shape[0] == 0:
        return (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std == 0, 1.0, std)
    return tuple(mean), tuple(std)


def synthetic_generate(spec: SyntheticSpec) -> Dataset:
    """Gaussian class blobs rendered to uint8 images.

    Each class has a fixed random prototype (a pixel pattern plus a
    per-channel offset, so the signal survives global pooling); samples are
    the prototype scaled by the separation plus unit noise. High separation
    makes classes linearly separable and separation zero is pure noise.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    scale = 1.0 / math.sqrt(spec.blob_separation**2 + 1.0)
    images, labels = [], []
    for cls in range(spec.num_classes):
        proto = rng.standard_normal((3, s, s)) + rng.standard_normal((3, 1, 1))
        for _ in range(spec.samples_per_class):
            signal = (spec.blob_separation * proto + rng.standard_normal((3, s, s))) * scale
            pixel = np.clip(np.rint(128 + 40 * signal), 0, 255).astype(np.uint8)
            images.append(pixel)
            labels.append(cls)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    mean, std = _computed_stats(images)
    return Dataset(images, labels, spec.num_classes, mean, std)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # SeedSequence entropy must be non-negative; fold the sign bit in
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, epoch]))


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield index arrays covering every record once, in a (seed, epoch)-determined
    order; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = _epoch_rng(seed, epoch).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        yield order[start : start + batch_size]


def augmentation_rng(seed: int, epoch: int) -> np.random.Generator:
    """Companion stream to `batches` for crop/flip draws in the same epoch."""
    return _epoch_rng(seed, epoch + 0x5EED)
