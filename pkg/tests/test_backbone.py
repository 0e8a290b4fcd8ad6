import pytest
import torch

from chanmoe import storage
from chanmoe.backbone import (Backbone, BackboneConfig, base_state, count_parameters, has_moe, load_pretrained,
                              save_pretrained)
from chanmoe.exceptions import ConfigurationError, LoadError, ShapeError
from chanmoe.moe_lora import inject

SMALL = BackboneConfig(model_dim=32, n_layers=2, n_heads=4, max_tokens=8)


class TestConfig:
    def test_heads_divide_dim(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(model_dim=30, n_heads=4)

    def test_layers_positive(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(n_layers=0)


class TestForward:
    def test_shape_and_determinism(self):
        bb = Backbone(SMALL).eval()
        x = torch.randn(3, 8, 32)
        y = bb(x)
        assert y.shape == (3, 8, 32)
        assert torch.equal(y, bb(x))

    def test_shorter_sequences_allowed(self):
        assert Backbone(SMALL)(torch.randn(1, 5, 32)).shape == (1, 5, 32)

    def test_shape_errors(self):
        bb = Backbone(SMALL)
        with pytest.raises(ShapeError):
            bb(torch.randn(1, 9, 32))
        with pytest.raises(ShapeError):
            bb(torch.randn(1, 8, 16))

    def test_seeded_init(self):
        a, b = Backbone(SMALL), Backbone(SMALL)
        assert all(torch.equal(a.state_dict()[k], v) for k, v in b.state_dict().items())

    def test_all_base_parameters_frozen(self):
        bb = Backbone(SMALL)
        assert count_parameters(bb, trainable_only=True) == 0
        inject(bb, n_experts=2, rank=2)
        trainable = [n for n, p in bb.named_parameters() if p.requires_grad]
        assert trainable and all(".A." in n or ".B." in n or n.endswith("gate") for n in trainable)
        assert has_moe(bb)

    def test_batch_permutation(self):
        bb = Backbone(SMALL).double()
        inject(bb, n_experts=2, rank=2)
        with torch.no_grad():
            for n, p in bb.named_parameters():
                if ".B." in n:
                    p.normal_()
        x = torch.randn(6, 8, 32, dtype=torch.float64)
        perm = torch.randperm(6)
        torch.testing.assert_close(bb(x[perm], "CP"), bb(x, "CP")[perm], atol=1e-12, rtol=0)
        torch.testing.assert_close(bb(x[:1], "CP"), bb(x, "CP")[:1], atol=1e-12, rtol=0)


class TestAttention:
    def test_rows_sum_to_one(self):
        maps = Backbone(SMALL).attention_maps(torch.randn(2, 8, 32))
        assert len(maps) == 2
        for m in maps:
            assert m.shape == (2, 4, 8, 8) and (m >= 0).all()
            torch.testing.assert_close(m.sum(-1), torch.ones(2, 4, 8), atol=1e-6, rtol=0)

    def test_causal_flag_masks_future(self):
        cfg = BackboneConfig(model_dim=32, n_layers=1, n_heads=4, max_tokens=8, causal=True)
        m = Backbone(cfg).attention_maps(torch.randn(1, 8, 32))[0]
        assert torch.count_nonzero(m.triu(1)) == 0

    def test_bidirectional_default_matches_forward(self):
        # The exported maps reproduce the block's attention output.
        bb = Backbone(SMALL).double()
        x = torch.randn(2, 8, 32, dtype=torch.float64)
        blk = bb.blocks[0]
        h = blk.ln1(x + bb.pos)
        v = blk.attn.qkv(h)[..., 64:].reshape(2, 8, 4, 8).transpose(1, 2)
        out = (bb.attention_maps(x)[0] @ v).transpose(1, 2).reshape(2, 8, 32)
        torch.testing.assert_close(blk.attn.proj(out), blk.attn(h), atol=1e-12, rtol=0)


class TestPretrained:
    def test_roundtrip_bit_exact(self, tmp_path):
        src = Backbone(BackboneConfig(model_dim=32, n_layers=2, n_heads=4, max_tokens=8, seed=7))
        save_pretrained(src, tmp_path / "bb.wm4c")
        loaded, warnings = load_pretrained(SMALL, tmp_path / "bb.wm4c")
        assert warnings == []
        for k, v in base_state(src).items():
            assert torch.equal(base_state(loaded)[k], v)
        assert count_parameters(loaded, trainable_only=True) == 0

    def test_save_strips_wrapper_names(self, tmp_path):
        bb = Backbone(SMALL)
        inject(bb)
        save_pretrained(bb, tmp_path / "bb.wm4c")
        tensors, _ = storage.load_named(tmp_path / "bb.wm4c")
        assert "blocks.0.ffn.fc_in.weight" in tensors
        assert not any(".base." in k or ".A." in k for k in tensors)

    def test_missing_block_named(self, tmp_path):
        save_pretrained(Backbone(BackboneConfig(model_dim=32, n_layers=1, n_heads=4, max_tokens=8)),
                        tmp_path / "one.wm4c")
        with pytest.raises(LoadError, match=r"blocks\.1\.attn\.qkv\.weight"):
            load_pretrained(SMALL, tmp_path / "one.wm4c")

    def test_extra_blocks_reported(self, tmp_path):
        save_pretrained(Backbone(BackboneConfig(model_dim=32, n_layers=3, n_heads=4, max_tokens=8)),
                        tmp_path / "three.wm4c")
        _, warnings = load_pretrained(SMALL, tmp_path / "three.wm4c")
        assert warnings and all("blocks.2." in w for w in warnings)

    def test_shape_mismatch_named(self, tmp_path):
        save_pretrained(Backbone(BackboneConfig(model_dim=32, n_layers=2, n_heads=4, max_tokens=16)),
                        tmp_path / "long.wm4c")
        with pytest.raises(LoadError, match="pos"):
            load_pretrained(SMALL, tmp_path / "long.wm4c")
