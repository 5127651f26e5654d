import json

import pytest
import yaml

from diffrobust.cli import EXIT_CONFIG, EXIT_OK, main


BASE_CONFIG = {
    "schedule": {"T": 50, "beta_start": 0.001, "beta_end": 0.02},
    "data": {"kind": "synthetic", "n": 24, "test_n": 8, "resolution": 8,
             "margin": 0.6},
    "backbone": {"resolution": 8, "in_channels": 3, "base_width": 8,
                 "channel_mults": [1, 2], "res_blocks": 1,
                 "attention_resolutions": [4], "time_embed_dim": 32,
                 "steps": 2, "batch_size": 8},
    "head": {"kind": "linear", "block": 0, "t": 1, "pool": 2,
             "train": {"epochs": 3, "lr": 0.03}},
    "threat": {"norm": "linf", "eps": 0.03137254901960784},
    "attack": {"kind": "fgsm", "name": "fgsm"},
    "sweep": {"blocks": [0], "timesteps": [1, 10], "heads": ["linear"],
              "attacks": [{"kind": "identity", "name": "identity"}],
              "pool": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    cfg_path = ws / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(BASE_CONFIG))
    return ws, cfg_path


def run(ws, cfg_path, *args):
    return main(["--config", str(cfg_path), "--out", str(ws / "run"), *args])


class TestPipeline:
    def test_pretrain(self, workspace, capsys):
        ws, cfg = workspace
        assert run(ws, cfg, "pretrain") == EXIT_OK
        assert (ws / "run" / "backbone" / "manifest.json").exists()
        assert (ws / "run" / "backbone" / "weights.bin").exists()
        out = capsys.readouterr().out
        assert "denoising loss" in out

    def test_train_head_after_pretrain(self, workspace, capsys):
        ws, cfg = workspace
        assert run(ws, cfg, "train-head") == EXIT_OK
        assert (ws / "run" / "head_linear_b0_t1" / "manifest.json").exists()

    def test_attack(self, workspace, capsys):
        ws, cfg = workspace
        assert run(ws, cfg, "attack") == EXIT_OK
        out = capsys.readouterr().out
        assert "clean accuracy" in out
        assert "fgsm" in out

    def test_sweep_then_report_and_compare(self, workspace, capsys):
        ws, cfg = workspace
        assert run(ws, cfg, "sweep") == EXIT_OK
        records = list((ws / "run" / "records").glob("cell_*.json"))
        assert len(records) >= 2
        assert run(ws, cfg, "report", "--style", "accuracy-table") == EXIT_OK
        assert (ws / "run" / "reports" / "accuracy_table.csv").exists()
        assert run(ws, cfg, "report", "--style",
                   "timestep-ablation") == EXIT_OK
        assert run(ws, cfg, "compare-paper") == EXIT_OK
        out = capsys.readouterr().out
        assert "literature" in out
        assert (ws / "run" / "reports" / "paper_comparison.csv").exists()

    def test_sweep_records_are_valid_json(self, workspace):
        ws, _ = workspace
        for path in (ws / "run" / "records").glob("cell_*.json"):
            rec = json.loads(path.read_text())
            assert {"config_hash", "metrics", "block", "timestep"} <= set(rec)


class TestErrorHandling:
    def test_missing_config_file(self, tmp_path):
        code = main(["--config", str(tmp_path / "nope.yaml"),
                     "--out", str(tmp_path / "o"), "pretrain"])
        assert code == EXIT_CONFIG

    def test_unknown_data_kind(self, tmp_path):
        cfg = dict(BASE_CONFIG)
        cfg["data"] = {"kind": "imagenet"}
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["--config", str(p), "--out", str(tmp_path / "o"),
                     "pretrain"]) == EXIT_CONFIG

    def test_cifar_without_root(self, tmp_path):
        cfg = dict(BASE_CONFIG)
        cfg["data"] = {"kind": "cifar10"}
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["--config", str(p), "--out", str(tmp_path / "o"),
                     "pretrain"]) == EXIT_CONFIG

    def test_report_on_empty_run_dir(self, tmp_path):
        assert main(["--out", str(tmp_path / "empty"),
                     "report"]) == EXIT_CONFIG

    def test_invalid_schedule_config(self, tmp_path):
        cfg = dict(BASE_CONFIG)
        cfg["schedule"] = {"T": 0}
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert main(["--config", str(p), "--out", str(tmp_path / "o"),
                     "pretrain"]) == EXIT_CONFIG

    def test_json_config_accepted(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(BASE_CONFIG))
        assert main(["--config", str(p), "--out", str(tmp_path / "o"),
                     "pretrain"]) == EXIT_OK
