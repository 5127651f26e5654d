"""Sweep orchestration: (block x timestep x head) cells, clean/robust metrics,
a crash-safe append-only results store, and table/plot reports.

Store layout under a run directory: `config.lock` (fully resolved config),
one JSON record per cell written via temp-file + atomic rename, and an
`index.json` rebuilt on open.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import reference
from .attacks import (
    AttackConfig,
    ThreatModel,
    apgd,
    autoattack,
    bim,
    cw_attack,
    fab,
    fgsm,
    pgd,
    square_attack,
)
from .backbone import BackboneCheckpoint, ProbeSpec
from .heads import DiffusionClassifier, TrainConfig, train_head
from .schedule import NoiseSchedule

SCHEMA_VERSION = 1


class ReportError(ValueError):
    """Report style incompatible with the given records."""


@dataclass(frozen=True)
class SweepGrid:
    blocks: tuple
    timesteps: tuple
    heads: tuple = ("linear",)
    attacks: tuple = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    threat: ThreatModel = field(default_factory=ThreatModel)
    pool: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.blocks or not self.timesteps or not self.heads:
            raise ValueError("sweep axes must be non-empty")

    def cells(self):
        for head in self.heads:
            for b in self.blocks:
                for t in self.timesteps:
                    yield (int(b), int(t), head)

    def to_dict(self) -> dict:
        return {
            "blocks": [int(b) for b in self.blocks],
            "timesteps": [int(t) for t in self.timesteps],
            "heads": list(self.heads),
            "attacks": [a.to_dict() for a in self.attacks],
            "train": self.train.to_dict(),
            "threat": self.threat.to_dict(),
            "pool": self.pool,
            "seed": self.seed,
        }


@dataclass
class RunRecord:
    config_hash: str
    block: int
    timestep: int
    head: str
    metrics: dict
    wall_time: float
    artifacts: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    partial: bool = False
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash, "block": self.block,
            "timestep": self.timestep, "head": self.head,
            "metrics": self.metrics, "wall_time": self.wall_time,
            "artifacts": self.artifacts, "schema_version": self.schema_version,
            "partial": self.partial, "errors": self.errors,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunRecord":
        return RunRecord(
            config_hash=d["config_hash"], block=d["block"],
            timestep=d["timestep"], head=d["head"], metrics=d["metrics"],
            wall_time=d["wall_time"], artifacts=d.get("artifacts", {}),
            schema_version=d.get("schema_version", SCHEMA_VERSION),
            partial=d.get("partial", False), errors=d.get("errors", {}),
        )


def config_hash(config: dict) -> str:
    """Stable digest of a JSON-serializable config; key order irrelevant."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _atomic_write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _cell_filename(block: int, t: int, head: str) -> str:
    return f"cell_b{block}_t{t}_{head}.json"


def open_store(run_dir) -> Path:
    run_dir = Path(run_dir)
    (run_dir / "records").mkdir(parents=True, exist_ok=True)
    rebuild_index(run_dir)
    return run_dir


def rebuild_index(run_dir) -> dict:
    run_dir = Path(run_dir)
    records_dir = run_dir / "records"
    index = {"records": sorted(p.name for p in records_dir.glob("cell_*.json"))}
    if records_dir.exists():
        _atomic_write_json(run_dir / "index.json", index)
    return index


def load_records(run_dir) -> list[RunRecord]:
    run_dir = Path(run_dir)
    records = []
    for path in sorted((run_dir / "records").glob("cell_*.json")):
        records.append(RunRecord.from_dict(json.loads(path.read_text())))
    return records


def run_attack(cfg: AttackConfig, model, x, y, tm: ThreatModel, sample_ids=None):
    """Dispatch one configured attack.  extras={'eps': v} overrides the budget."""
    if "eps" in cfg.extras:
        tm = ThreatModel(norm=tm.norm, eps=float(cfg.extras["eps"]), box=tm.box)
    kind = cfg.kind
    if kind == "identity":
        return pgd(model, x, y, tm, steps=0, step_size=1.0, random_start=False,
                   seed=cfg.seed, sample_ids=sample_ids)
    if kind == "fgsm":
        return fgsm(model, x, y, tm, sample_ids=sample_ids)
    if kind == "bim":
        return bim(model, x, y, tm, steps=cfg.steps, step_size=cfg.step_size,
                   seed=cfg.seed, sample_ids=sample_ids)
    if kind == "pgd":
        return pgd(model, x, y, tm, steps=cfg.steps, step_size=cfg.step_size,
                   random_start=cfg.random_start, restarts=cfg.restarts,
                   loss=cfg.loss, seed=cfg.seed, sample_ids=sample_ids)
    if kind == "cw":
        return cw_attack(model, x, y, tm, steps=cfg.steps,
                         step_size=cfg.step_size, seed=cfg.seed,
                         sample_ids=sample_ids)
    if kind == "apgd":
        return apgd(model, x, y, tm, steps=cfg.steps, loss=cfg.loss,
                    seed=cfg.seed, random_start=cfg.random_start,
                    sample_ids=sample_ids)
    if kind == "fab":
        return fab(model, x, y, tm, steps=cfg.steps, seed=cfg.seed,
                   sample_ids=sample_ids)
    if kind == "square":
        return square_attack(model, x, y, tm, query_budget=cfg.query_budget,
                             seed=cfg.seed, sample_ids=sample_ids)
    if kind == "autoattack":
        return autoattack(model, x, y, tm, seed=cfg.seed, steps=cfg.steps,
                          square_budget=cfg.query_budget, sample_ids=sample_ids)
    raise ValueError(f"unknown attack kind {kind!r}")


def _cell_config(ckpt, spec, head_kind, train_cfg, attack_cfgs, tm, s,
                 train_set, test_set, seed) -> dict:
    return {
        "backbone": {"config": ckpt.config.to_dict(), "metadata": ckpt.metadata},
        "probe": spec.to_dict(),
        "head": head_kind,
        "train": train_cfg.to_dict(),
        "attacks": [a.to_dict() for a in attack_cfgs],
        "threat": tm.to_dict(),
        "schedule": s.to_config(),
        "train_data": {"provenance": train_set.provenance, "n": len(train_set)},
        "test_data": {"provenance": test_set.provenance, "n": len(test_set)},
        "seed": int(seed),
    }


def evaluate_cell(ckpt: BackboneCheckpoint, spec: ProbeSpec, head_kind: str,
                  train_set, test_set, attack_cfgs, tm: ThreatModel,
                  train_cfg: TrainConfig, s: NoiseSchedule,
                  run_dir=None, seed: int = 0, batch_size: int = 64) -> RunRecord:
    """Train (or reuse) one head and measure clean + per-attack robust accuracy.

    If run_dir holds a record for this cell with the same config hash, it is
    returned without recomputation.
    """
    cfg_hash = config_hash(
        _cell_config(ckpt, spec, head_kind, train_cfg, attack_cfgs, tm, s,
                     train_set, test_set, seed)
    )
    record_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "records").mkdir(parents=True, exist_ok=True)
        record_path = run_dir / "records" / _cell_filename(spec.block, spec.t, head_kind)
        if record_path.exists():
            rec = RunRecord.from_dict(json.loads(record_path.read_text()))
            if rec.config_hash == cfg_hash:
                return rec

    start = time.monotonic()
    head, _log = train_head(ckpt, spec, train_set, train_cfg, s, head_kind=head_kind)

    images = test_set.to_torch()
    labels = torch.from_numpy(np.asarray(test_set.labels, dtype=np.int64))
    n = images.shape[0]

    clean_correct = 0
    robust_correct = {a.label: 0 for a in attack_cfgs}
    errors: dict = {}
    for i in range(0, n, batch_size):
        xb, yb = images[i : i + batch_size], labels[i : i + batch_size]
        ids = list(range(i, i + xb.shape[0]))
        model = DiffusionClassifier(ckpt, spec, s, head, xb.shape, sample_ids=ids)
        with torch.no_grad():
            clean_correct += int((model(xb).argmax(1) == yb).sum())
        for a in attack_cfgs:
            try:
                out = run_attack(a, model, xb, yb, tm, sample_ids=ids)
                with torch.no_grad():
                    pred = model(out.x_adv).argmax(1)
                robust_correct[a.label] += int((pred == yb).sum())
            except Exception as exc:
                errors[a.label] = str(exc)

    metrics = {
        "clean": clean_correct / n,
        "robust": {
            label: robust_correct[label] / n
            for label in robust_correct
            if label not in errors
        },
    }
    record = RunRecord(
        config_hash=cfg_hash, block=spec.block, timestep=spec.t, head=head_kind,
        metrics=metrics, wall_time=time.monotonic() - start,
        partial=bool(errors), errors=errors,
    )
    if record_path is not None:
        _atomic_write_json(record_path, record.to_dict())
        rebuild_index(run_dir)
    return record


def run_sweep(grid: SweepGrid, ckpt: BackboneCheckpoint, train_set, test_set,
              s: NoiseSchedule, run_dir, workers: int = 1) -> list[RunRecord]:
    """One record per (block, timestep, head) cell; completed cells are
    skipped on resume, per-cell failures are isolated."""
    run_dir = open_store(run_dir)
    _atomic_write_json(run_dir / "config.lock", grid.to_dict())

    def one(cell):
        b, t, head = cell
        spec = ProbeSpec(block=b, t=t, pool=grid.pool, noise_seed=grid.seed)
        return evaluate_cell(
            ckpt, spec, head, train_set, test_set, grid.attacks, grid.threat,
            grid.train, s, run_dir=run_dir, seed=grid.seed,
        )

    def guarded(cell):
        try:
            return one(cell)
        except Exception as exc:  # isolate cell failures, keep sweeping
            return (cell, str(exc))

    cells = list(grid.cells())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(guarded, cells))
    else:
        results = [guarded(cell) for cell in cells]
    records = [r for r in results if isinstance(r, RunRecord)]
    failures = {r[0]: r[1] for r in results if not isinstance(r, RunRecord)}
    if failures:
        _atomic_write_json(
            run_dir / "failures.json",
            {f"b{b}_t{t}_{h}": msg for (b, t, h), msg in failures.items()},
        )
    rebuild_index(run_dir)
    return records


def _fmt(v: float) -> str:
    return f"{100.0 * v:.2f}"


def _attack_labels(records) -> list[str]:
    labels = []
    for r in records:
        for label in r.metrics.get("robust", {}):
            if label not in labels:
                labels.append(label)
    return labels


def _write_table(path_base: Path, header: list[str], rows: list[list[str]]):
    csv_lines = [",".join(header)] + [",".join(r) for r in rows]
    (path_base.with_suffix(".csv")).write_text("\n".join(csv_lines) + "\n")
    widths = [
        max(len(str(x)) for x in [h] + [r[i] for r in rows])
        for i, h in enumerate(header)
    ]
    def fmt_row(r):
        return "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()
    txt = [fmt_row(header), fmt_row(["-" * w for w in widths])]
    txt += [fmt_row(r) for r in rows]
    (path_base.with_suffix(".txt")).write_text("\n".join(txt) + "\n")


def _ablation(records, axis: str):
    """Mean accuracy per attack against one axis, averaged over the other."""
    labels = _attack_labels(records)
    keys = sorted({(r.head, getattr(r, axis)) for r in records})
    rows = []
    for head, v in keys:
        group = [r for r in records if r.head == head and getattr(r, axis) == v]
        row = {"head": head, axis: v,
               "clean": float(np.mean([r.metrics["clean"] for r in group]))}
        for label in labels:
            vals = [r.metrics["robust"][label] for r in group
                    if label in r.metrics.get("robust", {})]
            row[label] = float(np.mean(vals)) if vals else float("nan")
        rows.append(row)
    return labels, rows


def _plot_ablation(rows, labels, axis: str, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    heads = sorted({r["head"] for r in rows})
    for head in heads:
        sub = [r for r in rows if r["head"] == head]
        xs = [r[axis] for r in sub]
        for label in ["clean"] + labels:
            ys = [100.0 * r[label] for r in sub]
            ax.plot(xs, ys, marker="o", label=f"{head}/{label}")
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy [%]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def emit_report(records, style: str, out_dir) -> list[Path]:
    """Write report files for one style; deterministic bytes for the tables."""
    if not records:
        raise ReportError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: (r.head, r.block, r.timestep))
    labels = _attack_labels(records)
    written = []

    if style == "accuracy-table":
        header = ["head", "block", "timestep", "clean"] + labels
        rows = []
        for r in records:
            row = [r.head, str(r.block), str(r.timestep), _fmt(r.metrics["clean"])]
            for label in labels:
                v = r.metrics.get("robust", {}).get(label)
                row.append(_fmt(v) if v is not None else "n/a")
            rows.append(row)
        base = out_dir / "accuracy_table"
        _write_table(base, header, rows)
        written += [base.with_suffix(".csv"), base.with_suffix(".txt")]
    elif style in ("block-ablation", "timestep-ablation"):
        axis = "block" if style == "block-ablation" else "timestep"
        _, rows = _ablation(records, axis)
        header = ["head", axis, "clean"] + labels
        table = [
            [r["head"], str(r[axis]), _fmt(r["clean"])]
            + [_fmt(r[label]) if not np.isnan(r[label]) else "n/a" for label in labels]
            for r in rows
        ]
        base = out_dir / style.replace("-", "_")
        _write_table(base, header, table)
        png = base.with_suffix(".png")
        _plot_ablation(rows, labels, axis, png)
        written += [base.with_suffix(".csv"), base.with_suffix(".txt"), png]
    else:
        raise ReportError(f"unknown report style {style!r}")
    return written


def reference_comparison(records, out_dir) -> Path:
    """Juxtapose measured desk-scale rows with the published literature rows.

    Literature rows carry a `literature` source flag and are never aggregated
    with measurements; no reproduction is claimed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = _attack_labels(records)
    lit_metrics = []
    for *_, metrics in reference.LITERATURE_ROWS:
        for m in metrics:
            if m != "clean" and m not in lit_metrics:
                lit_metrics.append(m)
    header = (["source", "dataset", "model", "head", "block", "timestep", "clean"]
              + labels + lit_metrics)

    rows = []
    for r in sorted(records, key=lambda x: (x.head, x.block, x.timestep)):
        row = ["measured", "desk", f"{r.head} head", r.head, str(r.block),
               str(r.timestep), _fmt(r.metrics["clean"])]
        row += [
            _fmt(r.metrics["robust"][l]) if l in r.metrics.get("robust", {}) else "n/a"
            for l in labels
        ]
        row += ["n/a"] * len(lit_metrics)
        rows.append(row)
    for dataset, label, head, block, t, metrics in reference.LITERATURE_ROWS:
        row = ["literature", dataset, label, head, str(block), str(t),
               f"{metrics['clean']:.2f}"]
        row += ["n/a"] * len(labels)
        row += [f"{metrics[m]:.2f}" if m in metrics else "n/a" for m in lit_metrics]
        rows.append(row)
    for dataset, label, metrics in reference.BASELINE_ROWS:
        row = ["literature", dataset, label, "-", "-", "-",
               f"{metrics['clean']:.2f}"]
        row += ["n/a"] * len(labels)
        row += [f"{metrics[m]:.2f}" if m in metrics else "n/a" for m in lit_metrics]
        rows.append(row)

    base = out_dir / "paper_comparison"
    _write_table(base, header, rows)
    return base.with_suffix(".txt")
