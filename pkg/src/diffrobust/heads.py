"""Lightweight classification heads on frozen diffusion features.

Two heads: a single linear layer on the pooled flat vector, and a single
self-attention layer over the k x k pooled cells treated as tokens (mean over
tokens, then a linear classifier).  Head checkpoints reuse the backbone's
manifest + weights.bin directory format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    BackboneCheckpoint,
    ProbeSpec,
    extract_features,
    pool_flatten,
    pool_tokens,
)
from .schedule import NoiseSchedule


class DataError(ValueError):
    """Empty dataset or out-of-range labels."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 20
    decay_factor: float = 0.1
    decay_every: int = 7
    momentum: float = 0.9
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hyperparameters must be positive (epochs >= 0)")
        if self.decay_every < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError("invalid decay schedule")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "batch_size": self.batch_size, "epochs": self.epochs,
            "decay_factor": self.decay_factor, "decay_every": self.decay_every,
            "momentum": self.momentum, "seed": self.seed,
            "val_fraction": self.val_fraction,
        }


class LinearHead(nn.Module):
    def __init__(self, feature_dim: int, classes: int):
        super().__init__()
        self.fc = nn.Linear(feature_dim, classes)

    @property
    def kind(self):
        return "linear"

    def forward(self, features):
        if features.shape[-1] != self.fc.in_features:
            raise ValueError(
                f"feature length {features.shape[-1]} != head dim {self.fc.in_features}"
            )
        return self.fc(features)


class AttentionHead(nn.Module):
    """Single self-attention layer over pooled-cell tokens, mean, then classify.

    With positional=False the logits are invariant to token permutation.
    """

    def __init__(self, channels: int, tokens: int, classes: int,
                 embed_dim: int | None = None, positional: bool = True):
        super().__init__()
        d = embed_dim if embed_dim is not None else min(channels, 256)
        self.embed = nn.Linear(channels, d)
        self.pos = nn.Parameter(torch.zeros(tokens, d)) if positional else None
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.classifier = nn.Linear(d, classes)
        self.tokens = tokens

    @property
    def kind(self):
        return "attention"

    def forward(self, tokens):
        if tokens.ndim != 3 or tokens.shape[1] != self.tokens:
            raise ValueError(
                f"expected (B, {self.tokens}, C) token grid, got {tuple(tokens.shape)}"
            )
        e = self.embed(tokens)
        if self.pos is not None:
            e = e + self.pos
        d = e.shape[-1]
        attn = torch.softmax(
            torch.bmm(self.q(e), self.k(e).transpose(1, 2)) / math.sqrt(d), dim=-1
        )
        h = e + self.out(torch.bmm(attn, self.v(e)))
        return self.classifier(h.mean(dim=1))


def head_forward(head: nn.Module, features: torch.Tensor) -> torch.Tensor:
    """Logits of a head on pooled features (flat vectors or token grids)."""
    return head(features)


class DiffusionClassifier(nn.Module):
    """The composed classifier: frozen noising draw -> frozen U-Net -> pool -> head.

    The per-sample noise draws are fixed at construction (keyed by
    spec.noise_seed and sample id), so the module is a deterministic,
    end-to-end differentiable function of its input batch.
    """

    def __init__(self, ckpt: BackboneCheckpoint, spec: ProbeSpec, s: NoiseSchedule,
                 head: nn.Module, batch_shape, sample_ids=None,
                 dtype=torch.float32):
        super().__init__()
        from .backbone import sample_eps

        self.ckpt = ckpt
        self.spec = spec
        self.schedule = s
        self.head = head
        if sample_ids is None:
            sample_ids = list(range(batch_shape[0]))
        self.sample_ids = [int(i) for i in sample_ids]
        self.eps = sample_eps(batch_shape, self.sample_ids, spec.noise_seed, dtype)

    def forward(self, x):
        fm = extract_features(self.ckpt, x, self.spec, self.schedule,
                              eps=self.eps[: x.shape[0]])
        if isinstance(self.head, AttentionHead):
            return self.head(pool_tokens(fm, self.spec.pool))
        return self.head(pool_flatten(fm, self.spec.pool))

    def subset(self, positions):
        """View of this classifier restricted to the given batch positions.

        Keeps the per-sample frozen noise draws aligned when an attack
        ensemble drops already-broken samples.
        """
        sub = DiffusionClassifier.__new__(DiffusionClassifier)
        nn.Module.__init__(sub)
        sub.ckpt = self.ckpt
        sub.spec = self.spec
        sub.schedule = self.schedule
        sub.head = self.head
        sub.sample_ids = [self.sample_ids[p] for p in positions]
        sub.eps = self.eps[list(positions)]
        return sub


def _features_for_head(ckpt, spec, images, head_kind, s, sample_ids, batch=64):
    feats = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            fm = extract_features(
                ckpt, images[i : i + batch], spec, s,
                sample_ids=sample_ids[i : i + batch],
            )
            if head_kind == "attention":
                feats.append(pool_tokens(fm, spec.pool))
            else:
                feats.append(pool_flatten(fm, spec.pool))
    return torch.cat(feats)


def make_head(head_kind: str, ckpt: BackboneCheckpoint, spec: ProbeSpec,
              classes: int, positional: bool = True) -> nn.Module:
    desc = ckpt.blocks[spec.block]
    if head_kind == "linear":
        return LinearHead(desc.channels * spec.pool * spec.pool, classes)
    if head_kind == "attention":
        return AttentionHead(desc.channels, spec.pool * spec.pool, classes,
                             positional=positional)
    raise ValueError(f"unknown head kind {head_kind!r}")


def train_head(
    ckpt: BackboneCheckpoint,
    spec: ProbeSpec,
    dataset,
    cfg: TrainConfig,
    s: NoiseSchedule,
    head_kind: str = "linear",
):
    """Train a head on frozen features by SGD on cross-entropy.

    dataset: LabeledImageSet.  Returns (head, log); log has one entry per
    epoch with lr, train/val loss and accuracy.  Deterministic given cfg.seed.
    """
    images = dataset.to_torch()
    labels = torch.from_numpy(np.asarray(dataset.labels, dtype=np.int64))
    classes = int(dataset.num_classes)
    if images.shape[0] == 0:
        raise DataError("empty dataset")
    if labels.min() < 0 or labels.max() >= classes:
        raise DataError(f"labels outside [0, {classes})")

    sample_ids = list(range(images.shape[0]))
    feats = _features_for_head(ckpt, spec, images, head_kind, s, sample_ids)

    rng = np.random.default_rng((int(cfg.seed), 0xA11))
    order = rng.permutation(images.shape[0])
    n_val = int(round(cfg.val_fraction * images.shape[0]))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise DataError("empty training split")

    torch.manual_seed(cfg.seed)
    head = make_head(head_kind, ckpt, spec, classes)
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum)

    def split_stats(idx):
        if len(idx) == 0:
            return float("nan"), float("nan")
        with torch.no_grad():
            logits = head(feats[idx])
            loss = F.cross_entropy(logits, labels[idx]).item()
            acc = (logits.argmax(1) == labels[idx]).float().mean().item()
        return loss, acc

    log = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = rng.permutation(train_idx)
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            loss = F.cross_entropy(head(feats[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        train_loss, train_acc = split_stats(train_idx)
        val_loss, val_acc = split_stats(val_idx)
        log.append({
            "epoch": epoch, "lr": lr,
            "train_loss": train_loss, "train_acc": train_acc,
            "val_loss": val_loss, "val_acc": val_acc,
        })
    head.eval()
    return head, log


def predict(head, ckpt: BackboneCheckpoint, spec: ProbeSpec, s: NoiseSchedule,
            x0: torch.Tensor, sample_ids=None):
    """Class indices and logits for a batch; ties break toward the smallest index."""
    if sample_ids is None:
        sample_ids = list(range(x0.shape[0]))
    with torch.no_grad():
        fm = extract_features(ckpt, x0, spec, s, sample_ids=sample_ids)
        if isinstance(head, AttentionHead):
            logits = head(pool_tokens(fm, spec.pool))
        else:
            logits = head(pool_flatten(fm, spec.pool))
    return logits.argmax(dim=1).numpy(), logits.numpy()


def save_head(head: nn.Module, spec: ProbeSpec, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays, offset, chunks = [], 0, []
    for name, tensor in head.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arrays.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    if isinstance(head, LinearHead):
        config = {"kind": "linear", "feature_dim": head.fc.in_features,
                  "classes": head.fc.out_features}
    elif isinstance(head, AttentionHead):
        config = {"kind": "attention", "channels": head.embed.in_features,
                  "tokens": head.tokens, "classes": head.classifier.out_features,
                  "embed_dim": head.embed.out_features,
                  "positional": head.pos is not None}
    else:
        raise ValueError(f"cannot serialize head of type {type(head).__name__}")
    manifest = {
        "format_version": 1, "endianness": "little", "kind": "head",
        "config": config, "probe_spec": spec.to_dict(),
        "metadata": extra or {}, "arrays": arrays,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (path / "weights.bin").write_bytes(b"".join(chunks))


def load_head(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = manifest["config"]
    torch.manual_seed(0)
    if cfg["kind"] == "linear":
        head = LinearHead(cfg["feature_dim"], cfg["classes"])
    else:
        head = AttentionHead(cfg["channels"], cfg["tokens"], cfg["classes"],
                             embed_dim=cfg["embed_dim"], positional=cfg["positional"])
    blob = (path / "weights.bin").read_bytes()
    state = {}
    for spec in manifest["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=spec["offset"])
        state[spec["name"]] = torch.from_numpy(arr.reshape(shape).copy())
    head.load_state_dict(state)
    head.eval()
    probe = ProbeSpec(**manifest["probe_spec"])
    return head, probe
