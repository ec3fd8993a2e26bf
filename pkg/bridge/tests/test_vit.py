import numpy as np
import pytest
import torch

from shardbridge.vit import VitS8, build_backbone, interpolate_pos_embed


@pytest.fixture(scope="module")
def backbone():
    return build_backbone(224, checkpoint=None, seed=0)


def random_input(seed=0, size=224):
    torch.manual_seed(seed)
    return torch.randn(1, 3, size, size)


class TestShapes:
    def test_vits8_dimensions_at_224(self, backbone):
        cls_attn, keys, tokens = backbone(random_input())
        assert cls_attn.shape == (1, 784, 6)
        assert keys.shape == (1, 6, 784, 64)
        assert tokens.shape == (1, 784, 384)

    def test_other_resolution(self):
        backbone = build_backbone(112, checkpoint=None, seed=0)
        cls_attn, keys, _ = backbone(random_input(size=112))
        assert cls_attn.shape == (1, 196, 6)
        assert keys.shape == (1, 6, 196, 64)

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError):
            VitS8(225)


class TestAttention:
    def test_rows_nonnegative(self, backbone):
        cls_attn, _, _ = backbone(random_input(1))
        assert (cls_attn >= 0).all()

    def test_rows_are_softmax_slices(self, backbone):
        # the CLS row sums to one over all tokens, so the patch slice
        # must sum to at most one
        cls_attn, _, _ = backbone(random_input(2))
        per_head_total = cls_attn[0].sum(dim=0)
        assert (per_head_total <= 1.0 + 1e-5).all()
        assert (per_head_total > 0).all()


class TestDeterminism:
    def test_same_input_same_output(self, backbone):
        x = random_input(3)
        a = backbone(x)
        b = backbone(x)
        for lhs, rhs in zip(a, b):
            assert torch.equal(lhs, rhs)

    def test_same_seed_same_backbone(self):
        x = random_input(4)
        a = build_backbone(224, None, seed=9)(x)
        b = build_backbone(224, None, seed=9)(x)
        assert torch.equal(a[0], b[0])


class TestCheckpoint:
    def test_state_dict_roundtrip(self, backbone, tmp_path):
        path = tmp_path / "weights.pth"
        torch.save(backbone.state_dict(), path)
        loaded = VitS8(224)
        loaded.load_checkpoint(path)
        loaded.eval()
        x = random_input(5)
        assert torch.equal(backbone(x)[0], loaded(x)[0])

    def test_wrapped_state_dict_accepted(self, backbone, tmp_path):
        path = tmp_path / "wrapped.pth"
        torch.save({"state_dict": backbone.state_dict()}, path)
        loaded = VitS8(224)
        loaded.load_checkpoint(path)

    def test_mismatched_checkpoint_aborts(self, backbone, tmp_path):
        state = backbone.state_dict()
        state["blocks.0.attn.qkv.weight"] = torch.zeros(3, 3)
        path = tmp_path / "bad.pth"
        torch.save(state, path)
        fresh = VitS8(224)
        with pytest.raises(RuntimeError, match="mismatch"):
            fresh.load_checkpoint(path)

    def test_missing_keys_abort(self, tmp_path):
        path = tmp_path / "tiny.pth"
        torch.save({"cls_token": torch.zeros(1, 1, 384)}, path)
        with pytest.raises(RuntimeError, match="lacks"):
            VitS8(224).load_checkpoint(path)

    def test_pos_embed_interpolated_across_sizes(self, backbone, tmp_path):
        path = tmp_path / "w224.pth"
        torch.save(backbone.state_dict(), path)
        other = VitS8(112)
        other.load_checkpoint(path)
        assert other.pos_embed.shape == (1, 197, 384)


class TestPosEmbedInterpolation:
    def test_identity_when_same_size(self):
        pos = torch.randn(1, 785, 384)
        assert torch.equal(interpolate_pos_embed(pos, 784), pos)

    def test_cls_part_untouched(self):
        pos = torch.randn(1, 785, 384)
        out = interpolate_pos_embed(pos, 196)
        assert out.shape == (1, 197, 384)
        assert torch.equal(out[:, 0], pos[:, 0])
