"""Sweep (block x timestep x head) cells and emit the reports.

Each cell trains one head on frozen features and measures clean and robust
accuracy. Results land in a crash-safe record store; re-running skips
completed cells. The reports include the juxtaposition against published
reference values (flagged as literature, never merged with measurements).
"""

from pathlib import Path

from diffrobust import (
    AttackConfig,
    ProbeSpec,
    SweepGrid,
    ThreatModel,
    TrainConfig,
    UNetConfig,
    default_schedule,
    emit_report,
    make_synthetic_twoclass,
    reference_comparison,
    run_sweep,
)
from diffrobust.backbone import pretrain_backbone

RUN_DIR = Path(__file__).parent / "_artifacts" / "sweep"

sched = default_schedule(1000)
cfg = UNetConfig(resolution=16, in_channels=3, base_width=16,
                 channel_mults=(1, 2), res_blocks=1,
                 attention_resolutions=(8,), time_embed_dim=64)
train = make_synthetic_twoclass(256, resolution=16, margin=0.1, seed=0)
test = make_synthetic_twoclass(64, resolution=16, margin=0.1, seed=1)
ckpt = pretrain_backbone(train.images, cfg, sched, steps=200, seed=0,
                         batch_size=16)

grid = SweepGrid(
    blocks=(0, 2), timesteps=(10, 90), heads=("linear",),
    attacks=(AttackConfig(kind="fgsm", name="fgsm"),
             AttackConfig(kind="pgd", steps=20, step_size=2 / 255,
                          name="pgd-20")),
    train=TrainConfig(epochs=20, seed=0),
    threat=ThreatModel(norm="linf", eps=8 / 255),
    pool=2, seed=0,
)
records = run_sweep(grid, ckpt, train, test, sched, RUN_DIR)
print(f"{len(records)} cells evaluated")

for style in ("accuracy-table", "timestep-ablation"):
    for p in emit_report(records, style, RUN_DIR / "reports"):
        print(f"wrote {p}")
path = reference_comparison(records, RUN_DIR / "reports")
print(f"wrote {path}\n")
print(path.read_text())
