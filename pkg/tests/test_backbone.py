import json

import numpy as np
import pytest
import torch

from diffrobust import (
    ProbeSpec,
    UNetConfig,
    build_linear_schedule,
    extract_features,
    list_blocks,
    load_checkpoint,
    pool_flatten,
    pool_tokens,
    pretrain_backbone,
    save_checkpoint,
)
from diffrobust.backbone import (
    ConfigurationError,
    probe_feature_vectors,
    sample_eps,
)
from diffrobust.data import make_synthetic_twoclass


class TestBlockTable:
    def test_names_and_order(self, tiny_ckpt):
        names = [b.name for b in list_blocks(tiny_ckpt)]
        assert names == ["enc0", "enc1", "mid", "dec0", "dec1"]
        assert [b.index for b in list_blocks(tiny_ckpt)] == list(range(5))

    def test_shapes_match_live_probes(self, tiny_ckpt):
        x = torch.zeros(1, 3, 8, 8)
        with torch.no_grad():
            outs = tiny_ckpt.model(x, 1, collect=True)
        for desc, h in zip(list_blocks(tiny_ckpt), outs):
            assert (desc.channels, desc.height, desc.width) == tuple(h.shape[1:])


class TestSampleEps:
    def test_keyed_by_sample_id_not_position(self):
        a = sample_eps((3, 2, 4, 4), [10, 11, 12], seed=0)
        b = sample_eps((1, 2, 4, 4), [11], seed=0)
        assert torch.equal(a[1], b[0])

    def test_seed_changes_draw(self):
        a = sample_eps((1, 2, 4, 4), [0], seed=0)
        b = sample_eps((1, 2, 4, 4), [0], seed=1)
        assert not torch.equal(a, b)


class TestExtractFeatures:
    def test_deterministic(self, tiny_ckpt, sched):
        x = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(3))
        spec = ProbeSpec(block=2, t=30, pool=2, noise_seed=7)
        with torch.no_grad():
            f1 = extract_features(tiny_ckpt, x, spec, sched)
            f2 = extract_features(tiny_ckpt, x, spec, sched)
        assert torch.equal(f1, f2)

    def test_sample_id_invariance(self, tiny_ckpt, sched):
        # The noise draw is keyed by sample id, so a sample's features do not
        # depend on its batch context (up to batched-kernel rounding).
        x = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(4))
        spec = ProbeSpec(block=1, t=10, noise_seed=0)
        with torch.no_grad():
            batch = extract_features(tiny_ckpt, x, spec, sched,
                                     sample_ids=[5, 6, 7, 8])
            solo = extract_features(tiny_ckpt, x[2:3], spec, sched,
                                    sample_ids=[7])
        assert torch.allclose(batch[2:3], solo, atol=1e-5, rtol=1e-5)

    def test_invalid_block_or_timestep(self, tiny_ckpt, sched):
        x = torch.rand(1, 3, 8, 8)
        with pytest.raises(IndexError):
            extract_features(tiny_ckpt, x, ProbeSpec(block=5, t=10), sched)
        with pytest.raises(IndexError):
            extract_features(tiny_ckpt, x, ProbeSpec(block=0, t=0), sched)
        with pytest.raises(IndexError):
            extract_features(tiny_ckpt, x, ProbeSpec(block=0, t=sched.T + 1), sched)

    def test_differentiable_in_x0(self, tiny_ckpt, sched):
        x = torch.rand(2, 3, 8, 8, requires_grad=True)
        spec = ProbeSpec(block=0, t=5)
        out = extract_features(tiny_ckpt, x, spec, sched)
        out.sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()

    def test_gradient_matches_central_differences(self, tiny_cfg, sched):
        # 64-bit copy of the backbone so a 1e-4 stencil is meaningful
        imgs = make_synthetic_twoclass(8, resolution=8, seed=1).images
        ckpt = pretrain_backbone(imgs, tiny_cfg, sched, steps=0, seed=2)
        ckpt.model.double()
        spec = ProbeSpec(block=2, t=20, pool=2, noise_seed=0)
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(5))
        rng = np.random.default_rng(6)
        w = torch.from_numpy(rng.standard_normal(
            pool_flatten(extract_features(ckpt, x, spec, sched), 2).shape[1]
        ))

        def scalar(inp):
            return (pool_flatten(
                extract_features(ckpt, inp, spec, sched), 2
            ) @ w).sum()

        xg = x.clone().requires_grad_(True)
        scalar(xg).backward()
        grad = xg.grad.flatten()

        h = 1e-4
        coords = rng.choice(x.numel(), size=20, replace=False)
        for c in coords:
            xp, xm = x.clone().flatten(), x.clone().flatten()
            xp[c] += h
            xm[c] -= h
            with torch.no_grad():
                fd = (scalar(xp.view_as(x)) - scalar(xm.view_as(x))) / (2 * h)
            denom = max(abs(float(fd)), 1e-8)
            assert abs(float(grad[c]) - float(fd)) / denom <= 1e-3


class TestPooling:
    def test_hand_value_single_cell(self):
        fm = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert pool_flatten(fm, 1).tolist() == [[2.5]]

    def test_identity_when_grid_equals_spatial(self):
        fm = torch.rand(2, 3, 4, 4)
        assert torch.allclose(pool_flatten(fm, 4), fm.flatten(1))

    def test_length_and_token_shape(self, tiny_ckpt, sched):
        x = torch.rand(2, 3, 8, 8)
        spec = ProbeSpec(block=1, t=10)
        with torch.no_grad():
            fm = extract_features(tiny_ckpt, x, spec, sched)
        c = fm.shape[1]
        assert pool_flatten(fm, 2).shape == (2, c * 4)
        assert pool_tokens(fm, 2).shape == (2, 4, c)

    def test_tokens_consistent_with_flat(self):
        fm = torch.rand(2, 5, 4, 4)
        flat = pool_flatten(fm, 2).reshape(2, 5, 4)
        tok = pool_tokens(fm, 2).permute(0, 2, 1)
        assert torch.allclose(flat, tok)

    def test_oversized_grid_raises(self):
        fm = torch.rand(1, 2, 2, 2)
        with pytest.raises(ValueError):
            pool_flatten(fm, 3)
        with pytest.raises(ValueError):
            pool_tokens(fm, 3)
        with pytest.raises(ValueError):
            pool_flatten(fm, 0)

    def test_probe_feature_vectors_provenance(self, tiny_ckpt, sched):
        x = torch.rand(3, 3, 8, 8)
        spec = ProbeSpec(block=0, t=5, pool=2)
        vecs = probe_feature_vectors(tiny_ckpt, x, spec, sched,
                                     sample_ids=[7, 8, 9])
        assert [v.sample_id for v in vecs] == [7, 8, 9]
        assert all(v.spec == spec for v in vecs)
        c = list_blocks(tiny_ckpt)[0].channels
        assert vecs[0].values.shape == (c * 4,)


class TestPretrain:
    def test_frozen_parameters(self, tiny_ckpt):
        assert all(not p.requires_grad for p in tiny_ckpt.model.parameters())

    def test_zero_steps_keeps_initial_loss(self, tiny_cfg, sched):
        imgs = make_synthetic_twoclass(8, resolution=8, seed=3).images
        ckpt = pretrain_backbone(imgs, tiny_cfg, sched, steps=0, seed=0)
        assert ckpt.metadata["initial_val_loss"] == ckpt.metadata["final_val_loss"]

    def test_training_reduces_heldout_loss(self, tiny_cfg, sched):
        imgs = make_synthetic_twoclass(32, resolution=8, seed=4).images
        ckpt = pretrain_backbone(imgs, tiny_cfg, sched, steps=80, seed=0,
                                 batch_size=16, lr=1e-3)
        assert ckpt.metadata["final_val_loss"] < ckpt.metadata["initial_val_loss"]

    def test_deterministic_given_seed(self, tiny_cfg, sched):
        imgs = make_synthetic_twoclass(8, resolution=8, seed=5).images
        a = pretrain_backbone(imgs, tiny_cfg, sched, steps=5, seed=11)
        b = pretrain_backbone(imgs, tiny_cfg, sched, steps=5, seed=11)
        assert a.state_bytes() == b.state_bytes()

    def test_shape_mismatch_raises(self, tiny_cfg, sched):
        imgs = make_synthetic_twoclass(8, resolution=16, seed=0).images
        with pytest.raises(ConfigurationError):
            pretrain_backbone(imgs, tiny_cfg, sched, steps=0, seed=0)

    def test_negative_steps_raise(self, tiny_cfg, sched):
        imgs = make_synthetic_twoclass(8, resolution=8, seed=0).images
        with pytest.raises(ValueError):
            pretrain_backbone(imgs, tiny_cfg, sched, steps=-1, seed=0)


class TestCheckpointIO:
    def test_roundtrip_bytes_and_features(self, tiny_ckpt, sched, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.state_bytes() == tiny_ckpt.state_bytes()
        assert loaded.metadata == tiny_ckpt.metadata
        assert list_blocks(loaded) == list_blocks(tiny_ckpt)
        x = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(9))
        spec = ProbeSpec(block=3, t=40)
        with torch.no_grad():
            assert torch.equal(
                extract_features(loaded, x, spec, sched),
                extract_features(tiny_ckpt, x, spec, sched),
            )

    def test_manifest_structure(self, tiny_ckpt, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert manifest["endianness"] == "little"
        assert manifest["format_version"] == 1
        blob_len = (tmp_path / "ck" / "weights.bin").stat().st_size
        last = manifest["arrays"][-1]
        assert last["offset"] + 4 * int(np.prod(last["shape"])) == blob_len
        offsets = [a["offset"] for a in manifest["arrays"]]
        assert offsets == sorted(offsets)

    def test_bad_endianness_rejected(self, tiny_ckpt, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "ck")
        mpath = tmp_path / "ck" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["endianness"] = "big"
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path / "ck")

    def test_tampered_block_table_rejected(self, tiny_ckpt, tmp_path):
        save_checkpoint(tiny_ckpt, tmp_path / "ck")
        mpath = tmp_path / "ck" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["blocks"][0]["channels"] += 1
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path / "ck")
