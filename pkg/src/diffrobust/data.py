"""Dataset ingestion: CIFAR-10 binary batches and a synthetic two-class corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

CIFAR_RECORD = 3073  # 1 label byte + 3 x 1024 channel-planar pixel bytes
CIFAR_BATCH_RECORDS = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch"]


class IngestionError(RuntimeError):
    """Missing or corrupt dataset files."""


@dataclass(frozen=True)
class LabeledImageSet:
    """Images (N, H, W, C) in [0,1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    provenance: str

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image count != label count")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels outside [0, 1]")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def to_torch(self) -> torch.Tensor:
        """Images as a float32 (N, C, H, W) tensor."""
        return torch.from_numpy(
            np.ascontiguousarray(self.images)
        ).float().permute(0, 3, 1, 2)

    def take(self, indices) -> "LabeledImageSet":
        idx = np.asarray(indices)
        return LabeledImageSet(
            images=self.images[idx], labels=self.labels[idx],
            num_classes=self.num_classes, split=self.split,
            provenance=self.provenance,
        )


def _stratified_subset(labels: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Seeded class-stratified sample without replacement, proportions +-1."""
    rng = np.random.default_rng((int(seed), 0xCA7))
    classes = np.unique(labels)
    n = len(labels)
    quota = {c: size * np.sum(labels == c) // n for c in classes}
    short = size - sum(quota.values())
    for c in rng.permutation(classes)[:short]:
        quota[c] += 1
    picks = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        picks.append(rng.choice(pool, size=quota[c], replace=False))
    return np.sort(np.concatenate(picks))


def load_cifar10(root, split: str, subset_size: int | None = None,
                 seed: int = 0) -> LabeledImageSet:
    """Load CIFAR-10 from the standard binary batch files.

    subset_size selects a seeded, class-stratified sample without
    replacement; None keeps the full split.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    records = []
    for name in files:
        path = root / f"{name}.bin"
        if not path.exists():
            path = root / name
        if not path.exists():
            raise IngestionError(f"missing CIFAR-10 batch file {name} under {root}")
        raw = path.read_bytes()
        if len(raw) != CIFAR_RECORD * CIFAR_BATCH_RECORDS:
            raise IngestionError(
                f"{path} has {len(raw)} bytes, expected "
                f"{CIFAR_RECORD * CIFAR_BATCH_RECORDS}"
            )
        records.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    data = np.concatenate(records)
    labels = data[:, 0].astype(np.int64)
    if subset_size is not None:
        if subset_size <= 0:
            raise IngestionError("subset size must be positive")
        if subset_size > len(labels):
            raise IngestionError(
                f"subset size {subset_size} exceeds split size {len(labels)}"
            )
        idx = _stratified_subset(labels, subset_size, seed)
        data, labels = data[idx], labels[idx]
    # convert to float only after subsetting: the full split in float is large
    images = (
        data[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32)
        / 255.0
    )
    return LabeledImageSet(images=images, labels=labels, num_classes=10,
                           split=split, provenance=f"cifar10:{root}")


def make_synthetic_twoclass(n: int, resolution: int = 16, margin: float = 0.5,
                            seed: int = 0) -> LabeledImageSet:
    """Two-class blob corpus, linearly separable in pixel space by construction.

    Class 0: bright blob in the top-left corner; class 1: bottom-right.
    Backgrounds are noisy in [0, bg_hi], blobs in [bg_hi + margin, 1], so the
    inter-class pixel margin on the blob regions is >= margin.
    """
    if n % 2 != 0:
        raise ValueError("n must be even (balanced classes)")
    if margin <= 0 or margin >= 1:
        raise ValueError("margin must lie in (0, 1)")
    rng = np.random.default_rng((int(seed), 0x2C1A55))
    bg_hi = min(0.25, (1.0 - margin) / 2)
    blob_lo = bg_hi + margin
    side = max(2, resolution // 4)
    images = rng.uniform(0.0, bg_hi, size=(n, resolution, resolution, 3))
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2 :] = 1
    for i in range(n):
        val = rng.uniform(blob_lo, 1.0)
        if labels[i] == 0:
            images[i, :side, :side, :] = val
        else:
            images[i, -side:, -side:, :] = val
    perm = rng.permutation(n)
    return LabeledImageSet(
        images=images[perm], labels=labels[perm], num_classes=2,
        split="train", provenance=f"synthetic-twoclass:n={n},res={resolution}",
    )
