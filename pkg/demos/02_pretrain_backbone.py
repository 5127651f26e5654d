"""Pretrain a tiny denoising backbone and inspect its tappable blocks.

The backbone is an epsilon-prediction U-Net trained on the synthetic
two-class corpus. After training it is frozen; every residual block output
(encoder, middle, decoder) becomes a feature tap for probing.
"""

from pathlib import Path

from diffrobust import (
    UNetConfig,
    default_schedule,
    list_blocks,
    load_checkpoint,
    make_synthetic_twoclass,
    save_checkpoint,
)
from diffrobust.backbone import pretrain_backbone

OUT = Path(__file__).parent / "_artifacts" / "backbone"

sched = default_schedule(1000)
cfg = UNetConfig(resolution=16, in_channels=3, base_width=16,
                 channel_mults=(1, 2), res_blocks=1,
                 attention_resolutions=(8,), time_embed_dim=64)
train = make_synthetic_twoclass(256, resolution=16, margin=0.1, seed=0)

ckpt = pretrain_backbone(train.images, cfg, sched, steps=200, seed=0,
                         batch_size=16, dataset_id=train.provenance,
                         log_every=50)
print(f"\nheld-out denoising loss: {ckpt.metadata['initial_val_loss']:.4f} "
      f"-> {ckpt.metadata['final_val_loss']:.4f}")

print("\ntappable blocks:")
for b in list_blocks(ckpt):
    print(f"  [{b.index}] {b.name:<5} {b.channels:>3} x {b.height} x {b.width}")

save_checkpoint(ckpt, OUT)
reloaded = load_checkpoint(OUT)
assert reloaded.state_bytes() == ckpt.state_bytes()
print(f"\ncheckpoint round-trips byte-for-byte at {OUT}")
