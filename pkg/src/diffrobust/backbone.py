"""Frozen epsilon-prediction backbone: pretraining, checkpoint I/O, feature taps.

Checkpoint format: a directory with `manifest.json` (architecture, named array
shapes/dtypes/offsets, endianness tag) and `weights.bin` (little-endian
float32, concatenated in manifest order).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, alpha_bar, q_sample
from .unet import UNet, UNetConfig

CHECKPOINT_FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Backbone configuration incompatible with the data or checkpoint."""


@dataclass(frozen=True)
class BlockDescriptor:
    index: int
    name: str
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class ProbeSpec:
    """One feature-extraction configuration: (block, timestep, pool grid, noise policy).

    noise_seed keys the deterministic one-draw-per-sample noise policy;
    callers may instead pass an explicit eps to extract_features.
    """

    block: int
    t: int
    pool: int = 4
    noise_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "t": self.t,
            "pool": self.pool,
            "noise_seed": self.noise_seed,
        }


@dataclass(frozen=True)
class FeatureVector:
    """Pooled, flattened feature vector with its extraction provenance."""

    values: np.ndarray
    spec: ProbeSpec
    sample_id: int


class BackboneCheckpoint:
    """Frozen U-Net plus architecture manifest and block descriptor table."""

    def __init__(self, config: UNetConfig, model: UNet, metadata: dict):
        self.config = config
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.metadata = dict(metadata)
        self.blocks = self._probe_blocks()

    def _probe_blocks(self) -> list[BlockDescriptor]:
        cfg = self.config
        p = next(self.model.parameters())
        x = torch.zeros(1, cfg.in_channels, cfg.resolution, cfg.resolution,
                        dtype=p.dtype, device=p.device)
        with torch.no_grad():
            outs = self.model(x, 1, collect=True)
        n_enc = cfg.levels * cfg.res_blocks
        descs = []
        for i, h in enumerate(outs):
            if i < n_enc:
                name = f"enc{i}"
            elif i == n_enc:
                name = "mid"
            else:
                name = f"dec{i - n_enc - 1}"
            descs.append(BlockDescriptor(i, name, h.shape[1], h.shape[2], h.shape[3]))
        return descs

    def state_bytes(self) -> bytes:
        """Weight blob as it would be written to weights.bin (frozen-ness checks)."""
        chunks = []
        for _, tensor in self.model.state_dict().items():
            chunks.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        return b"".join(chunks)


def list_blocks(ckpt: BackboneCheckpoint) -> list[BlockDescriptor]:
    """Ordered descriptors for every tappable block (encoder, middle, decoder)."""
    return list(ckpt.blocks)


def _per_sample_eps(shape, sample_ids, seed, dtype):
    draws = [
        np.random.default_rng((int(seed), int(sid))).standard_normal(shape[1:])
        for sid in sample_ids
    ]
    return torch.from_numpy(np.stack(draws)).to(dtype)


def sample_eps(shape, sample_ids, seed, dtype=torch.float32) -> torch.Tensor:
    """Deterministic per-sample Gaussian draws keyed by (seed, sample id)."""
    return _per_sample_eps(tuple(shape), sample_ids, seed, dtype)


def extract_features(
    ckpt: BackboneCheckpoint,
    x0: torch.Tensor,
    spec: ProbeSpec,
    s: NoiseSchedule,
    eps: torch.Tensor | None = None,
    sample_ids=None,
) -> torch.Tensor:
    """Noise x0 at spec.t, run the frozen U-Net up to spec.block, return that map.

    Differentiable in x0; the noise draw is a constant.  Without an explicit
    eps, one draw per sample id (default: batch position) is generated from
    spec.noise_seed.
    """
    if not 0 <= spec.block < ckpt.config.num_taps:
        raise IndexError(f"block {spec.block} outside 0..{ckpt.config.num_taps - 1}")
    if not 1 <= spec.t <= s.T:
        raise IndexError(f"timestep {spec.t} outside 1..{s.T}")
    if eps is None:
        if sample_ids is None:
            sample_ids = range(x0.shape[0])
        eps = _per_sample_eps(tuple(x0.shape), sample_ids, spec.noise_seed, x0.dtype)
    eps = eps.detach().to(x0.dtype)
    x_t = q_sample(x0, spec.t, eps, s).x_t
    return ckpt.model(x_t, spec.t, tap=spec.block)


def pool_flatten(fm: torch.Tensor, k: int) -> torch.Tensor:
    """Adaptive average pool to k x k, then flatten channel-major to (B, C*k*k)."""
    if k < 1:
        raise ValueError("pool grid must be >= 1")
    if k > fm.shape[-2] or k > fm.shape[-1]:
        raise ValueError(
            f"pool grid {k} exceeds spatial size {tuple(fm.shape[-2:])} (no upsampling)"
        )
    return F.adaptive_avg_pool2d(fm, k).flatten(1)


def pool_tokens(fm: torch.Tensor, k: int) -> torch.Tensor:
    """Adaptive average pool to k x k, returned as (B, k*k, C) token grids."""
    if k < 1:
        raise ValueError("pool grid must be >= 1")
    if k > fm.shape[-2] or k > fm.shape[-1]:
        raise ValueError(
            f"pool grid {k} exceeds spatial size {tuple(fm.shape[-2:])} (no upsampling)"
        )
    pooled = F.adaptive_avg_pool2d(fm, k)
    b, c = pooled.shape[0], pooled.shape[1]
    return pooled.reshape(b, c, k * k).permute(0, 2, 1)


def probe_feature_vectors(
    ckpt: BackboneCheckpoint,
    x0: torch.Tensor,
    spec: ProbeSpec,
    s: NoiseSchedule,
    sample_ids=None,
) -> list[FeatureVector]:
    """Convenience wrapper returning pooled vectors with provenance attached."""
    if sample_ids is None:
        sample_ids = list(range(x0.shape[0]))
    with torch.no_grad():
        flat = pool_flatten(extract_features(ckpt, x0, spec, s, sample_ids=sample_ids), spec.pool)
    return [
        FeatureVector(values=flat[i].cpu().numpy(), spec=spec, sample_id=int(sid))
        for i, sid in enumerate(sample_ids)
    ]


def _denoising_val_loss(model, images, schedule, seed):
    """MSE between eps and its prediction on a fixed, seeded (t, eps) per image."""
    rng = np.random.default_rng((int(seed), 0xD1F))
    total, n = 0.0, images.shape[0]
    with torch.no_grad():
        for i in range(0, n, 64):
            batch = images[i : i + 64]
            t = int(rng.integers(1, schedule.T + 1))
            eps = torch.from_numpy(
                rng.standard_normal(tuple(batch.shape))
            ).to(batch.dtype)
            x_t = q_sample(batch, t, eps, schedule).x_t
            pred = model(x_t, t)
            total += F.mse_loss(pred, eps, reduction="sum").item()
    return total / images.numel()


def pretrain_backbone(
    images: np.ndarray,
    cfg: UNetConfig,
    s: NoiseSchedule,
    steps: int,
    seed: int,
    batch_size: int = 32,
    lr: float = 2e-4,
    val_fraction: float = 0.1,
    dataset_id: str = "unknown",
    log_every: int = 0,
) -> BackboneCheckpoint:
    """Train the eps-prediction U-Net; bit-reproducible given (seed, data order).

    images: (N, H, W, C) float array in [0, 1].  steps=0 returns the
    initialized network with its held-out loss recorded.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if images.ndim != 4 or images.shape[1] != cfg.resolution or images.shape[3] != cfg.in_channels:
        raise ConfigurationError(
            f"dataset shape {images.shape} incompatible with config "
            f"(resolution {cfg.resolution}, channels {cfg.in_channels})"
        )
    torch.manual_seed(seed)
    model = UNet(cfg)

    x = torch.from_numpy(np.ascontiguousarray(images)).float().permute(0, 3, 1, 2)
    n_val = max(1, int(round(val_fraction * x.shape[0]))) if x.shape[0] > 1 else 0
    split_rng = np.random.default_rng((int(seed), 0x5EED))
    order = split_rng.permutation(x.shape[0])
    val_x = x[order[:n_val]] if n_val else x
    train_x = x[order[n_val:]] if n_val else x

    model.eval()
    initial_loss = _denoising_val_loss(model, val_x, s, seed)

    rng = np.random.default_rng((int(seed), 1))
    gen = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for step in range(steps):
        idx = rng.integers(0, train_x.shape[0], size=min(batch_size, train_x.shape[0]))
        batch = train_x[torch.from_numpy(idx)]
        t = torch.from_numpy(rng.integers(1, s.T + 1, size=batch.shape[0]))
        eps = torch.randn(batch.shape, generator=gen)
        c1 = torch.from_numpy(np.sqrt(s.alpha_bars[t.numpy() - 1])).float()
        c2 = torch.from_numpy(np.sqrt(1.0 - s.alpha_bars[t.numpy() - 1])).float()
        x_t = c1[:, None, None, None] * batch + c2[:, None, None, None] * eps
        pred = model(x_t, t.float())
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{steps} train mse {loss.item():.5f}")

    model.eval()
    final_loss = _denoising_val_loss(model, val_x, s, seed)
    metadata = {
        "dataset_id": dataset_id,
        "steps": int(steps),
        "seed": int(seed),
        "batch_size": int(batch_size),
        "lr": float(lr),
        "initial_val_loss": float(initial_loss),
        "final_val_loss": float(final_loss),
        "schedule": s.to_config(),
    }
    return BackboneCheckpoint(cfg, model, metadata)


def save_checkpoint(ckpt: BackboneCheckpoint, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays, offset, chunks = [], 0, []
    for name, tensor in ckpt.model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arrays.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "endianness": "little",
        "kind": "backbone",
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "blocks": [
            {"index": b.index, "name": b.name, "channels": b.channels,
             "height": b.height, "width": b.width}
            for b in ckpt.blocks
        ],
        "arrays": arrays,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (path / "weights.bin").write_bytes(b"".join(chunks))


def load_checkpoint(path) -> BackboneCheckpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("endianness") != "little":
        raise ConfigurationError("unsupported endianness tag")
    cfg = UNetConfig.from_dict(manifest["config"])
    torch.manual_seed(0)
    model = UNet(cfg)
    blob = (path / "weights.bin").read_bytes()
    state = {}
    for spec in manifest["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=spec["offset"])
        state[spec["name"]] = torch.from_numpy(arr.reshape(shape).copy())
    model.load_state_dict(state)
    ckpt = BackboneCheckpoint(cfg, model, manifest["metadata"])
    declared = [
        (b["index"], b["channels"], b["height"], b["width"]) for b in manifest["blocks"]
    ]
    observed = [(b.index, b.channels, b.height, b.width) for b in ckpt.blocks]
    if declared != observed:
        raise ConfigurationError("block descriptor table does not match probe shapes")
    return ckpt
