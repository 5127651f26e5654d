"""Run the attack battery against a classifier on frozen diffusion features.

Trains the standard desk-scale pipeline, then measures robust accuracy under
FGSM, PGD-20, CW, APGD, FAB, Square and the AutoAttack ensemble at
eps = 8/255 (L-infinity).
"""

import numpy as np
import torch

from diffrobust import (
    DiffusionClassifier,
    ProbeSpec,
    ThreatModel,
    TrainConfig,
    UNetConfig,
    apgd,
    autoattack,
    cw_attack,
    default_schedule,
    fab,
    fgsm,
    make_synthetic_twoclass,
    pgd,
    square_attack,
    train_head,
)
from diffrobust.backbone import pretrain_backbone

sched = default_schedule(1000)
cfg = UNetConfig(resolution=16, in_channels=3, base_width=16,
                 channel_mults=(1, 2), res_blocks=1,
                 attention_resolutions=(8,), time_embed_dim=64)
train = make_synthetic_twoclass(256, resolution=16, margin=0.1, seed=0)
test = make_synthetic_twoclass(128, resolution=16, margin=0.1, seed=1)
ckpt = pretrain_backbone(train.images, cfg, sched, steps=200, seed=0,
                         batch_size=16)
spec = ProbeSpec(block=2, t=10, pool=2, noise_seed=0)
head, _ = train_head(ckpt, spec, train, TrainConfig(epochs=20, seed=0), sched)

x, y = test.to_torch(), torch.from_numpy(test.labels)
model = DiffusionClassifier(ckpt, spec, sched, head, x.shape)
tm = ThreatModel(norm="linf", eps=8 / 255)

with torch.no_grad():
    clean = float((model(x).argmax(1) == y).float().mean())
print(f"clean accuracy: {100 * clean:.1f}%")

attacks = {
    "fgsm": lambda: fgsm(model, x, y, tm),
    "pgd-20": lambda: pgd(model, x, y, tm, steps=20, step_size=2 / 255,
                          random_start=True, seed=0),
    "cw-20": lambda: cw_attack(model, x, y, tm, steps=20, seed=0),
    "apgd-20": lambda: apgd(model, x, y, tm, steps=20, seed=0),
    "fab-10": lambda: fab(model, x, y, tm, steps=10, seed=0),
    "square-200": lambda: square_attack(model, x, y, tm, query_budget=200,
                                        seed=0),
    "autoattack": lambda: autoattack(model, x, y, tm, steps=20,
                                     square_budget=200, seed=0),
}
for name, run in attacks.items():
    out = run()
    robust = float((~out.success).mean())
    print(f"{name:<11} robust accuracy: {100 * robust:5.1f}%  "
          f"(max perturbation norm {np.max(out.norms):.4f})")
