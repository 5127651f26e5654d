"""Command-line interface.

Subcommands: pretrain, train-head, attack, sweep, report, compare-paper.
Global flags: --config (YAML or JSON), --seed, --out (run directory),
--workers.  Exit codes: 0 success, 1 partial (some cells/attacks failed),
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .attacks import AttackConfig, ThreatModel
from .backbone import (
    ProbeSpec,
    load_checkpoint,
    pretrain_backbone,
    save_checkpoint,
)
from .data import load_cifar10, make_synthetic_twoclass
from .harness import (
    SweepGrid,
    emit_report,
    evaluate_cell,
    load_records,
    reference_comparison,
    run_sweep,
)
from .heads import TrainConfig, save_head, train_head
from .schedule import build_linear_schedule
from .unet import UNetConfig

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return yaml.safe_load(text)


def _schedule_from(cfg: dict):
    s = cfg.get("schedule", {})
    return build_linear_schedule(
        int(s.get("T", 1000)),
        float(s.get("beta_start", 1e-4)),
        float(s.get("beta_end", 0.02)),
    )


def _datasets_from(cfg: dict, seed: int):
    d = cfg.get("data", {})
    kind = d.get("kind", "synthetic")
    if kind == "synthetic":
        train = make_synthetic_twoclass(
            int(d.get("n", 256)), resolution=int(d.get("resolution", 16)),
            margin=float(d.get("margin", 0.5)), seed=seed,
        )
        test = make_synthetic_twoclass(
            int(d.get("test_n", 128)), resolution=int(d.get("resolution", 16)),
            margin=float(d.get("margin", 0.5)), seed=seed + 1,
        )
        return train, test
    if kind == "cifar10":
        root = d.get("root")
        if root is None:
            raise ConfigError("data.root is required for cifar10")
        train = load_cifar10(root, "train",
                             subset_size=d.get("train_subset", 5000), seed=seed)
        test = load_cifar10(root, "test",
                            subset_size=d.get("test_subset", 1000), seed=seed)
        return train, test
    raise ConfigError(f"unknown data kind {kind!r}")


def _unet_config_from(cfg: dict) -> UNetConfig:
    b = cfg.get("backbone", {})
    return UNetConfig(
        resolution=int(b.get("resolution", 32)),
        in_channels=int(b.get("in_channels", 3)),
        base_width=int(b.get("base_width", 64)),
        channel_mults=tuple(b.get("channel_mults", (1, 2, 2))),
        res_blocks=int(b.get("res_blocks", 2)),
        attention_resolutions=tuple(b.get("attention_resolutions", (16,))),
        time_embed_dim=int(b.get("time_embed_dim", 256)),
    )


def _threat_from(cfg: dict) -> ThreatModel:
    t = cfg.get("threat", {})
    return ThreatModel(norm=t.get("norm", "linf"),
                       eps=float(t.get("eps", 8 / 255)),
                       box=tuple(t.get("box", (0.0, 1.0))))


def _train_config_from(cfg: dict, seed: int) -> TrainConfig:
    t = cfg.get("head", {}).get("train", {})
    return TrainConfig(
        lr=float(t.get("lr", 1e-2)), batch_size=int(t.get("batch_size", 32)),
        epochs=int(t.get("epochs", 20)),
        decay_factor=float(t.get("decay_factor", 0.1)),
        decay_every=int(t.get("decay_every", 7)),
        momentum=float(t.get("momentum", 0.9)),
        seed=seed, val_fraction=float(t.get("val_fraction", 0.1)),
    )


def _attack_config_from(a: dict, seed: int) -> AttackConfig:
    return AttackConfig(
        kind=a.get("kind", "pgd"), steps=int(a.get("steps", 20)),
        step_size=a.get("step_size", 2 / 255),
        restarts=int(a.get("restarts", 1)),
        random_start=bool(a.get("random_start", True)),
        loss=a.get("loss", "ce"),
        query_budget=int(a.get("query_budget", 1000)),
        seed=int(a.get("seed", seed)), name=a.get("name", ""),
        extras=dict(a.get("extras", {})),
    )


def _probe_from(cfg: dict, seed: int) -> ProbeSpec:
    h = cfg.get("head", {})
    return ProbeSpec(block=int(h.get("block", 0)), t=int(h.get("t", 10)),
                     pool=int(h.get("pool", 4)),
                     noise_seed=int(h.get("noise_seed", seed)))


def _ckpt_dir(cfg: dict, out: Path) -> Path:
    b = cfg.get("backbone", {})
    return Path(b.get("checkpoint", out / "backbone"))


def cmd_pretrain(cfg, seed, out, workers):
    schedule = _schedule_from(cfg)
    train, _ = _datasets_from(cfg, seed)
    ucfg = _unet_config_from(cfg)
    b = cfg.get("backbone", {})
    ckpt = pretrain_backbone(
        train.images, ucfg, schedule, steps=int(b.get("steps", 1000)),
        seed=seed, batch_size=int(b.get("batch_size", 32)),
        lr=float(b.get("lr", 2e-4)), dataset_id=train.provenance,
        log_every=int(b.get("log_every", 100)),
    )
    dest = _ckpt_dir(cfg, out)
    save_checkpoint(ckpt, dest)
    print(f"checkpoint written to {dest}")
    print(f"held-out denoising loss: {ckpt.metadata['initial_val_loss']:.5f} "
          f"-> {ckpt.metadata['final_val_loss']:.5f}")
    return EXIT_OK


def cmd_train_head(cfg, seed, out, workers):
    schedule = _schedule_from(cfg)
    train, _ = _datasets_from(cfg, seed)
    ckpt = load_checkpoint(_ckpt_dir(cfg, out))
    spec = _probe_from(cfg, seed)
    kind = cfg.get("head", {}).get("kind", "linear")
    head, log = train_head(ckpt, spec, train, _train_config_from(cfg, seed),
                           schedule, head_kind=kind)
    dest = out / f"head_{kind}_b{spec.block}_t{spec.t}"
    save_head(head, spec, dest, extra={"log": log})
    if log:
        print(f"final train acc {log[-1]['train_acc']:.3f} "
              f"val acc {log[-1]['val_acc']:.3f}")
    print(f"head written to {dest}")
    return EXIT_OK


def cmd_attack(cfg, seed, out, workers):
    schedule = _schedule_from(cfg)
    train, test = _datasets_from(cfg, seed)
    ckpt = load_checkpoint(_ckpt_dir(cfg, out))
    spec = _probe_from(cfg, seed)
    kind = cfg.get("head", {}).get("kind", "linear")
    tm = _threat_from(cfg)
    attack = _attack_config_from(cfg.get("attack", {}), seed)
    record = evaluate_cell(
        ckpt, spec, kind, train, test, [attack], tm,
        _train_config_from(cfg, seed), schedule, run_dir=out, seed=seed,
    )
    print(f"clean accuracy:  {100 * record.metrics['clean']:.2f}%")
    for label, acc in record.metrics["robust"].items():
        print(f"robust accuracy ({label}): {100 * acc:.2f}%")
    for label, err in record.errors.items():
        print(f"attack {label} failed: {err}", file=sys.stderr)
    return EXIT_PARTIAL if record.partial else EXIT_OK


def cmd_sweep(cfg, seed, out, workers):
    schedule = _schedule_from(cfg)
    train, test = _datasets_from(cfg, seed)
    ckpt = load_checkpoint(_ckpt_dir(cfg, out))
    sw = cfg.get("sweep", {})
    grid = SweepGrid(
        blocks=tuple(sw.get("blocks", [0])),
        timesteps=tuple(sw.get("timesteps", [10, 30, 90, 150])),
        heads=tuple(sw.get("heads", ["linear"])),
        attacks=tuple(_attack_config_from(a, seed) for a in sw.get("attacks", [])),
        train=_train_config_from(cfg, seed),
        threat=_threat_from(cfg),
        pool=int(sw.get("pool", cfg.get("head", {}).get("pool", 4))),
        seed=seed,
    )
    records = run_sweep(grid, ckpt, train, test, schedule, out, workers=workers)
    n_partial = sum(r.partial for r in records)
    print(f"{len(records)} cells evaluated, {n_partial} partial")
    return EXIT_PARTIAL if n_partial else EXIT_OK


def cmd_report(cfg, seed, out, workers, style="accuracy-table"):
    records = load_records(out)
    paths = emit_report(records, style, out / "reports")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_compare_paper(cfg, seed, out, workers):
    records = load_records(out)
    path = reference_comparison(records, out / "reports")
    print(path)
    print(Path(path).read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffrobust",
        description="Train, probe and attack classifiers on frozen diffusion features",
    )
    parser.add_argument("--config", type=Path, help="YAML or JSON config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("runs/default"),
                        help="run directory")
    parser.add_argument("--workers", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", help="pretrain the diffusion backbone")
    sub.add_parser("train-head", help="train a classification head")
    sub.add_parser("attack", help="evaluate one cell under one attack")
    sub.add_parser("sweep", help="run the (block x timestep x head) sweep")
    rep = sub.add_parser("report", help="emit reports from a run directory")
    rep.add_argument("--style", default="accuracy-table",
                     choices=["accuracy-table", "block-ablation", "timestep-ablation"])
    sub.add_parser("compare-paper",
                   help="juxtapose desk results with published literature rows")
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-head": cmd_train_head,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "compare-paper": cmd_compare_paper,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config) if args.config else {}
        if cfg is None:
            cfg = {}
        args.out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
        if args.command == "report":
            return cmd_report(cfg, args.seed, args.out, args.workers,
                              style=args.style)
        return COMMANDS[args.command](cfg, args.seed, args.out, args.workers)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
