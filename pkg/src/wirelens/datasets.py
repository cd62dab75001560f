"""Datasets: synthetic class-conditional blobs and the 3073-byte binary
image format (1 label byte + 3 x 1024 channel-plane bytes per record)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RECORD_BYTES = 3073
_IMG_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def synth_dataset(classes: int, size: tuple[int, int, int], n: int,
                  noise: float, seed: int = 0) -> Dataset:
    """Gaussian-blob class-conditional images.

    Each class has a fixed template drawn once from the seeded stream;
    samples are template + noise * N(0, 1). Labels cycle deterministically,
    so the data is linearly separable at noise 0 and collapses to chance as
    noise grows.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    c, h, w = size
    rng = np.random.default_rng(seed)
    templates = rng.normal(0.0, 1.0, size=(classes, c, h, w))
    labels = np.arange(n, dtype=np.int64) % classes
    images = templates[labels] + noise * rng.normal(0.0, 1.0, size=(n, c, h, w))
    return Dataset(images=images, labels=labels,
                   meta={"kind": "synthetic", "classes": classes, "noise": noise,
                         "seed": seed})


def load_cifar10_binary(path, limit: int | None = None) -> Dataset:
    """Load one binary batch file of 3073-byte records.

    Pixels are scaled to [0, 1] and standardized per channel; the
    standardization constants and the raw bytes are kept in ``meta`` so
    records can be re-serialized exactly.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise ValueError(
            f"truncated record at byte offset {offset}: file holds {len(raw)} bytes, "
            f"not a multiple of {RECORD_BYTES}")
    n = len(raw) // RECORD_BYTES
    if limit is not None:
        n = min(n, limit)
    buf = np.frombuffer(raw, dtype=np.uint8)[:n * RECORD_BYTES].reshape(n, RECORD_BYTES)
    labels = buf[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        idx = int(bad[0])
        raise ValueError(
            f"invalid label byte {int(labels[idx])} at byte offset {idx * RECORD_BYTES} "
            "(valid range 0-9)")
    pixels = buf[:, 1:].reshape(n, *_IMG_SHAPE)
    images = pixels.astype(np.float64) / 255.0
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std == 0, 1.0, std)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images=images, labels=labels,
                   meta={"kind": "cifar10", "path": str(path),
                         "channel_mean": mean.tolist(), "channel_std": std.tolist(),
                         "raw": pixels})


def cifar10_record_bytes(dataset: Dataset, index: int) -> bytes:
    """Re-serialize one loaded record to its original 3073 bytes."""
    if "raw" not in dataset.meta:
        raise ValueError("dataset was not loaded from the binary format")
    mean = np.asarray(dataset.meta["channel_mean"])
    std = np.asarray(dataset.meta["channel_std"])
    img = dataset.images[index] * std[:, None, None] + mean[:, None, None]
    pixels = np.rint(img * 255.0).astype(np.uint8)
    return bytes([int(dataset.labels[index])]) + pixels.tobytes()


def split_dataset(dataset: Dataset, ratio: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint (train, search) split; ``ratio`` is the train fraction."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(n * ratio))
    if k == 0 or k == n:
        raise ValueError(f"split ratio {ratio} leaves an empty side for n={n}")
    tr, se = perm[:k], perm[k:]
    return (
        Dataset(dataset.images[tr], dataset.labels[tr], {**dataset.meta, "split": "train"}),
        Dataset(dataset.images[se], dataset.labels[se], {**dataset.meta, "split": "search"}),
    )


def iter_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator,
                 drop_tail: bool = True):
    """Seeded-permutation minibatches of (images, labels)."""
    perm = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = perm[start:start + batch_size]
        if drop_tail and idx.size < batch_size:
            continue
        if idx.size < 2:
            continue
        yield dataset.images[idx], dataset.labels[idx]
